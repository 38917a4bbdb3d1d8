//! Synthetic ray-based deployment sites and channel datasets.
//!
//! A site is a fixed set of point scatterers drawn once from the site seed.
//! Each user sees an optional direct path plus single-bounce paths through
//! its nearest scatterers, so users of the same site share a small set of
//! departure angles and the per-user beam targets carry site structure.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::{dft, phase, steering_vector, ArrayGeometry, ComplexVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, o: &Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Area {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Area {
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    fn sample(&self, rng: &mut impl Rng) -> Point {
        Point::new(
            self.x_min + (self.x_max - self.x_min) * rng.random::<f64>(),
            self.y_min + (self.y_max - self.y_min) * rng.random::<f64>(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteConfig {
    pub seed: u64,
    pub n_antennas: usize,
    pub spacing_ratio: f64,
    pub n_paths: usize,
    pub n_scatterers: usize,
    pub area: Area,
    pub bs_position: Point,
    pub los_probability: f64,
    pub pathloss_exponent: f64,
    /// Power attenuation applied per path order to scattered paths.
    pub path_decay: f64,
    /// Reference length (meters) scaling the two-hop amplitude of scattered paths.
    pub scatter_gain: f64,
}

impl Default for SiteConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_antennas: 32,
            spacing_ratio: 0.5,
            n_paths: 5,
            n_scatterers: 12,
            area: Area { x_min: 20.0, x_max: 80.0, y_min: -50.0, y_max: 50.0 },
            bs_position: Point::new(0.0, 0.0),
            los_probability: 0.5,
            pathloss_exponent: 2.0,
            path_decay: 0.6,
            scatter_gain: 20.0,
        }
    }
}

impl SiteConfig {
    pub fn validate(&self) -> Result<()> {
        ArrayGeometry::new(self.n_antennas, self.spacing_ratio)?;
        if self.n_paths == 0 {
            return Err(Error::config("n_paths must be at least 1"));
        }
        if self.n_scatterers + 1 < self.n_paths {
            return Err(Error::config(format!(
                "n_scatterers ({}) must be at least n_paths - 1 ({})",
                self.n_scatterers,
                self.n_paths - 1
            )));
        }
        let a = &self.area;
        if !(a.x_max > a.x_min && a.y_max > a.y_min) || ![a.x_min, a.x_max, a.y_min, a.y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::config("site area is degenerate"));
        }
        if !(0.0..=1.0).contains(&self.los_probability) {
            return Err(Error::config("los_probability must lie in [0, 1]"));
        }
        if !(self.pathloss_exponent > 0.0) {
            return Err(Error::config("pathloss_exponent must be positive"));
        }
        if !(self.path_decay > 0.0 && self.path_decay <= 1.0) || !(self.scatter_gain > 0.0) {
            return Err(Error::config("path_decay must be in (0, 1] and scatter_gain positive"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> ArrayGeometry {
        ArrayGeometry { n_antennas: self.n_antennas, spacing_ratio: self.spacing_ratio }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub config: SiteConfig,
    pub scatterers: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub ue_position: Point,
    pub h: ComplexVector,
    pub is_los: bool,
}

/// Angular-domain generative target: DFT phases and scaled DFT magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSample {
    pub phase_row: Vec<f64>,
    pub amp_row: Vec<f64>,
}

impl TargetSample {
    /// Flattened `(2, N)` layout: phase row then amplitude row.
    pub fn to_latent(&self) -> Vec<f64> {
        self.phase_row.iter().chain(&self.amp_row).copied().collect()
    }
}

/// Scatterer positions are drawn from a ChaCha stream keyed by the site seed.
pub fn generate_site(config: &SiteConfig) -> Result<Site> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scatterers = (0..config.n_scatterers).map(|_| config.area.sample(&mut rng)).collect();
    Ok(Site { config: config.clone(), scatterers })
}

fn azimuth(from: &Point, to: &Point) -> f64 {
    (to.y - from.y).atan2(to.x - from.x)
}

/// Draws one user channel at `ue_position`.
pub fn sample_channel(site: &Site, ue_position: Point, rng: &mut impl Rng) -> Result<ChannelSample> {
    let cfg = &site.config;
    if !cfg.area.contains(&ue_position) {
        return Err(Error::config(format!("UE position ({}, {}) outside site area", ue_position.x, ue_position.y)));
    }
    let geom = cfg.geometry();
    let n_scattered = (cfg.n_paths - 1).min(site.scatterers.len());
    let draw = rng.random::<f64>();
    // with no scattered path available the direct path is the only one
    let is_los = n_scattered == 0 || draw < cfg.los_probability;
    let half_exp = cfg.pathloss_exponent / 2.0;
    let bs = cfg.bs_position;

    let mut paths: Vec<(f64, f64)> = Vec::with_capacity(cfg.n_paths);
    if is_los {
        let d = bs.dist(&ue_position).max(1e-3);
        paths.push((azimuth(&bs, &ue_position), d.powf(-half_exp)));
    }
    let mut order: Vec<usize> = (0..site.scatterers.len()).collect();
    order.sort_by(|&a, &b| {
        let da = site.scatterers[a].dist(&ue_position);
        let db = site.scatterers[b].dist(&ue_position);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    for (rank, &si) in order.iter().take(n_scattered).enumerate() {
        let s = site.scatterers[si];
        let d1 = bs.dist(&s).max(1e-3);
        let d2 = s.dist(&ue_position).max(1e-3);
        let amp = cfg.scatter_gain.powf(half_exp)
            * (d1 * d2).powf(-half_exp)
            * cfg.path_decay.powf((rank + 1) as f64 / 2.0);
        paths.push((azimuth(&bs, &s), amp));
    }

    let mut h = ComplexVector::zeros(cfg.n_antennas);
    for (angle, amp) in paths {
        let ph = 2.0 * PI * rng.random::<f64>();
        let a = steering_vector(angle, &geom)?;
        h = h.add(&a.scale(Complex64::from_polar(amp, ph)))?;
    }
    Ok(ChannelSample { ue_position, h: phase_reference(&h), is_los })
}

/// Removes the common phase of `h` so its strongest DFT bin is real and
/// positive. Gains and RSRP are invariant to this rotation.
pub fn phase_reference(h: &ComplexVector) -> ComplexVector {
    let spec = dft(h);
    let peak = spec.as_slice().iter().copied().max_by(|a, b| a.norm_sqr().total_cmp(&b.norm_sqr())).unwrap_or_default();
    if peak.norm() == 0.0 {
        return h.clone();
    }
    h.scale(peak.conj() / peak.norm())
}

/// Builds the angular-domain target of `h`.
pub fn target_sample(h: &ComplexVector, amp_scale: f64) -> TargetSample {
    let spec = dft(h);
    TargetSample {
        phase_row: spec.as_slice().iter().map(|&z| phase(z)).collect(),
        amp_row: spec.as_slice().iter().map(|z| z.norm() / amp_scale).collect(),
    }
}

/// Users of one site, training records first.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_antennas: usize,
    pub n_paths: usize,
    pub amp_scale: f64,
    pub train_count: usize,
    pub channels: Vec<ChannelSample>,
    pub targets: Vec<TargetSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.train_count
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.train_count..self.channels.len()
    }

    fn from_channels(n_paths: usize, amp_scale: f64, train_count: usize, channels: Vec<ChannelSample>) -> Result<Self> {
        let n_antennas = channels.first().map(|c| c.h.len()).ok_or_else(|| Error::config("empty dataset"))?;
        let targets = channels.iter().map(|c| target_sample(&c.h, amp_scale)).collect();
        Ok(Self { n_antennas, n_paths, amp_scale, train_count, channels, targets })
    }
}

pub fn build_dataset(site: &Site, n_users: usize, train_fraction: f64, seed: u64) -> Result<Dataset> {
    if n_users < 2 {
        return Err(Error::config("a dataset needs at least 2 users"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction must lie strictly between 0 and 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let pos = site.config.area.sample(&mut rng);
        channels.push(sample_channel(site, pos, &mut rng)?);
    }
    let train_count = ((n_users as f64 * train_fraction).round() as usize).clamp(1, n_users - 1);
    let mut sum_sq = 0.0;
    for c in &channels[..train_count] {
        sum_sq += dft(&c.h).as_slice().iter().map(|z| z.norm_sqr()).sum::<f64>();
    }
    let amp_scale = (sum_sq / (train_count * site.config.n_antennas) as f64).sqrt();
    if !(amp_scale > 0.0) {
        return Err(Error::config("training channels carry no energy"));
    }
    Dataset::from_channels(site.config.n_paths, amp_scale, train_count, channels)
}

pub const DATASET_MAGIC: &[u8; 8] = b"FBBSDATA";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset<W: Write>(ds: &Dataset, w: &mut W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.n_antennas as u32).to_le_bytes())?;
    w.write_all(&(ds.n_paths as u32).to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&ds.amp_scale.to_le_bytes())?;
    w.write_all(&(ds.train_count as u64).to_le_bytes())?;
    for c in &ds.channels {
        w.write_all(&c.ue_position.x.to_le_bytes())?;
        w.write_all(&c.ue_position.y.to_le_bytes())?;
        w.write_all(&[u8::from(c.is_los)])?;
        for z in c.h.as_slice() {
            w.write_all(&z.re.to_le_bytes())?;
            w.write_all(&z.im.to_le_bytes())?;
        }
    }
    Ok(())
}

struct LeReader<R> {
    inner: R,
}

impl<R: Read> LeReader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format("file truncated"),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut r = LeReader { inner: r };
    if &r.bytes::<8>()? != DATASET_MAGIC {
        return Err(Error::format("not a dataset file (bad magic)"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let n_antennas = r.u32()? as usize;
    let n_paths = r.u32()? as usize;
    let n_users = r.u64()? as usize;
    let amp_scale = r.f64()?;
    let train_count = r.u64()? as usize;
    if n_antennas < 2 || n_users < 2 || train_count == 0 || train_count >= n_users || !(amp_scale > 0.0) {
        return Err(Error::format("inconsistent dataset header"));
    }
    let mut channels = Vec::with_capacity(n_users.min(1 << 20));
    for _ in 0..n_users {
        let x = r.f64()?;
        let y = r.f64()?;
        let is_los = match r.bytes::<1>()?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::format(format!("invalid LoS flag {b}"))),
        };
        let mut h = Vec::with_capacity(n_antennas);
        for _ in 0..n_antennas {
            let re = r.f64()?;
            let im = r.f64()?;
            h.push(Complex64::new(re, im));
        }
        channels.push(ChannelSample { ue_position: Point::new(x, y), h: ComplexVector::new(h)?, is_los });
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::format("trailing bytes after last record"));
    }
    Dataset::from_channels(n_paths, amp_scale, train_count, channels)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
