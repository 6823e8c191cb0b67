//! Synthetic thoracic phantoms: structure images (CT-like intensity,
//! target mask, organ masks) with an analytic ground-truth dose.
//!
//! Geometry is a jittered arrangement of ellipses inside a body
//! ellipse: two lungs (one shared mask channel), a heart, a spinal
//! cord, and a disc-shaped planning target placed inside one lung.
//! The dose is 1.0 inside the target and decays as
//! `exp(-d / falloff)` with `d` the Euclidean distance to the target
//! boundary, masked to the body. A disc target keeps the dose exactly
//! nonincreasing along rays leaving it, which the tests rely on.
//!
//! Everything is a pure function of the spec (including its seed), so
//! datasets rebuild byte-identically.

mod io;

pub use io::{
    build_dataset, read_array_file, write_array_file, Dataset, Manifest, SampleEntry, Split,
    SplitLists,
};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Structure channel layout: intensity, target, then one channel per
/// organ at risk.
pub const CH_INTENSITY: usize = 0;
pub const CH_PTV: usize = 1;
pub const CH_HEART: usize = 2;
pub const CH_LUNGS: usize = 3;
pub const CH_CORD: usize = 4;
pub const STRUCTURE_CHANNELS: usize = 5;

/// Generation parameters; a phantom is a pure function of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Dose falloff length scale in pixels.
    pub falloff: f64,
    /// Target disc radius as a fraction of the image extent.
    pub ptv_radius_range: (f64, f64),
    /// Fractional jitter applied to organ centers and axes.
    pub jitter: f64,
}

impl PhantomSpec {
    pub fn desk(seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            height: 64,
            width: 64,
            falloff: 6.0,
            ptv_radius_range: (0.07, 0.11),
            jitter: 0.06,
        }
    }

    pub fn with_seed(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::InvalidConfig(format!(
                "phantom grid {}x{} must be at least 32x32",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// (2+O)-channel anatomical stack, row-major (C, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct StructureImage {
    pub data: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl StructureImage {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// (1, 2+O, H, W) tensor view for the network.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.data.clone(),
            &[1, STRUCTURE_CHANNELS, self.height, self.width],
        )
        .expect("structure buffer matches its shape")
    }
}

/// Single-channel nonnegative dose grid, prescription normalized to
/// 1.0 inside the target.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseMap {
    pub data: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl DoseMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[1, 1, self.height, self.width])
            .expect("dose buffer matches its shape")
    }
}

/// One generated sample: anatomy, dose, and the body support mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub structure: StructureImage,
    pub dose: DoseMap,
    pub body: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }
}

fn rasterize(e: &Ellipse, h: usize, w: usize) -> Vec<f64> {
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if e.contains(x as f64, y as f64) {
                mask[y * w + x] = 1.0;
            }
        }
    }
    mask
}

fn intersect(mask: &mut [f64], other: &[f64]) {
    for (m, o) in mask.iter_mut().zip(other.iter()) {
        *m *= o;
    }
}

fn overlaps(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b.iter()).any(|(x, y)| *x > 0.0 && *y > 0.0)
}

/// Analytic dose from a target and body mask: 1.0 inside the target,
/// `exp(-d / falloff)` outside with `d` the Euclidean distance to the
/// nearest target boundary pixel, 0 outside the body. Values clamp to
/// [0, 1.2].
pub fn dose_from_masks(
    ptv: &[f64],
    body: &[f64],
    h: usize,
    w: usize,
    falloff: f64,
) -> Result<Vec<f64>> {
    if ptv.iter().all(|v| *v == 0.0) {
        return Err(Error::EmptyMask { what: "dose target" });
    }
    // target pixels adjacent to non-target pixels; nearest-set queries
    // from outside only ever hit these
    let mut boundary: Vec<(f64, f64)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if ptv[y * w + x] == 0.0 {
                continue;
            }
            let edge = x == 0
                || x == w - 1
                || y == 0
                || y == h - 1
                || ptv[y * w + x - 1] == 0.0
                || ptv[y * w + x + 1] == 0.0
                || ptv[(y - 1) * w + x] == 0.0
                || ptv[(y + 1) * w + x] == 0.0;
            if edge {
                boundary.push((x as f64, y as f64));
            }
        }
    }
    let mut dose = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if body[i] == 0.0 {
                continue;
            }
            if ptv[i] > 0.0 {
                dose[i] = 1.0;
                continue;
            }
            let mut d2 = f64::INFINITY;
            for &(bx, by) in &boundary {
                let dx = x as f64 - bx;
                let dy = y as f64 - by;
                d2 = d2.min(dx * dx + dy * dy);
            }
            dose[i] = (-d2.sqrt() / falloff).exp().clamp(0.0, 1.2);
        }
    }
    Ok(dose)
}

/// Generates one phantom; retries with perturbed seeds (up to 10
/// attempts) if the rasterized geometry degenerates.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut reason = String::new();
    for attempt in 0..10 {
        let seed = spec
            .seed
            .wrapping_add((attempt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        match try_generate(spec, seed) {
            Ok(p) => return Ok(p),
            Err(e) => reason = e,
        }
    }
    Err(Error::DegenerateGeometry {
        attempts: 10,
        reason,
    })
}

fn try_generate(spec: &PhantomSpec, seed: u64) -> std::result::Result<Phantom, String> {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut jitter = |base: f64| base * (1.0 + spec.jitter * rng.gen_range(-1.0..1.0));

    let body = Ellipse {
        cx: jitter(0.50) * wf,
        cy: jitter(0.52) * hf,
        ax: jitter(0.42) * wf,
        ay: jitter(0.38) * hf,
    };
    let lung_l = Ellipse {
        cx: jitter(0.33) * wf,
        cy: jitter(0.45) * hf,
        ax: jitter(0.13) * wf,
        ay: jitter(0.20) * hf,
    };
    let lung_r = Ellipse {
        cx: jitter(0.67) * wf,
        cy: jitter(0.45) * hf,
        ax: jitter(0.13) * wf,
        ay: jitter(0.20) * hf,
    };
    let heart = Ellipse {
        cx: jitter(0.47) * wf,
        cy: jitter(0.60) * hf,
        ax: jitter(0.11) * wf,
        ay: jitter(0.10) * hf,
    };
    let cord = Ellipse {
        cx: jitter(0.50) * wf,
        cy: jitter(0.82) * hf,
        ax: jitter(0.030) * wf.max(hf),
        ay: jitter(0.030) * wf.max(hf),
    };
    // target: a disc inside one lung
    let host = if rng.gen_bool(0.5) { &lung_l } else { &lung_r };
    let r_ptv = rng.gen_range(spec.ptv_radius_range.0..=spec.ptv_radius_range.1) * wf.min(hf);
    let ptv = Ellipse {
        cx: host.cx + rng.gen_range(-0.3..0.3) * host.ax,
        cy: host.cy + rng.gen_range(-0.3..0.3) * host.ay,
        ax: r_ptv,
        ay: r_ptv,
    };

    let body_mask = rasterize(&body, h, w);
    let mut lungs_mask = rasterize(&lung_l, h, w);
    let lung_r_mask = rasterize(&lung_r, h, w);
    for (a, b) in lungs_mask.iter_mut().zip(lung_r_mask.iter()) {
        *a = (*a + *b).min(1.0);
    }
    let mut heart_mask = rasterize(&heart, h, w);
    let mut cord_mask = rasterize(&cord, h, w);
    let mut ptv_mask = rasterize(&ptv, h, w);
    intersect(&mut lungs_mask, &body_mask);
    intersect(&mut heart_mask, &body_mask);
    intersect(&mut cord_mask, &body_mask);
    intersect(&mut ptv_mask, &body_mask);

    if ptv_mask.iter().all(|v| *v == 0.0) {
        return Err("empty target after rasterization".into());
    }
    if cord_mask.iter().all(|v| *v == 0.0) {
        return Err("empty spinal cord".into());
    }
    if overlaps(&ptv_mask, &cord_mask) {
        return Err("target overlaps the spinal cord".into());
    }
    // the target may overlap its host lung but no second organ
    if overlaps(&ptv_mask, &heart_mask) {
        return Err("target overlaps the heart".into());
    }

    let dose = dose_from_masks(&ptv_mask, &body_mask, h, w, spec.falloff)
        .map_err(|e| e.to_string())?;

    // CT-like channel: organ densities composited then box-blurred
    let mut intensity = vec![0.0; h * w];
    for i in 0..h * w {
        if body_mask[i] > 0.0 {
            intensity[i] = 0.30;
        }
        if lungs_mask[i] > 0.0 {
            intensity[i] = 0.08;
        }
        if heart_mask[i] > 0.0 {
            intensity[i] = 0.50;
        }
        if cord_mask[i] > 0.0 {
            intensity[i] = 0.55;
        }
        if ptv_mask[i] > 0.0 {
            intensity[i] = 0.50;
        }
    }
    for _ in 0..2 {
        intensity = box_blur(&intensity, h, w);
    }

    let mut data = Vec::with_capacity(STRUCTURE_CHANNELS * h * w);
    data.extend_from_slice(&intensity);
    data.extend_from_slice(&ptv_mask);
    data.extend_from_slice(&heart_mask);
    data.extend_from_slice(&lungs_mask);
    data.extend_from_slice(&cord_mask);

    Ok(Phantom {
        structure: StructureImage {
            data,
            height: h,
            width: w,
        },
        dose: DoseMap {
            data: dose,
            height: h,
            width: w,
        },
        body: body_mask,
    })
}

fn box_blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut count = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                        acc += src[ny as usize * w + nx as usize];
                        count += 1.0;
                    }
                }
            }
            out[y * w + x] = acc / count;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dose_probe_point_at_one_falloff_length() {
        // rectangular target [10, 20] x [10, 20] in a fully-open body:
        // the pixel at (20 + k, 15) sits exactly k pixels from the
        // boundary pixel (20, 15)
        let (h, w) = (40, 40);
        let mut ptv = vec![0.0; h * w];
        for y in 10..=20 {
            for x in 10..=20 {
                ptv[y * w + x] = 1.0;
            }
        }
        let body = vec![1.0; h * w];
        let ell = 6.0;
        let dose = dose_from_masks(&ptv, &body, h, w, ell).unwrap();
        assert_eq!(dose[15 * w + 15], 1.0); // inside target
        let probe = dose[15 * w + 20 + 6]; // distance = falloff
        assert!(
            (probe - (-1.0f64).exp()).abs() < 1e-12,
            "probe {probe} vs e^-1"
        );
        let two = dose[15 * w + 20 + 12]; // two falloff lengths
        assert!((two - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn dose_is_zero_outside_body_and_one_inside_target() {
        let p = generate_phantom(&PhantomSpec::desk(3)).unwrap();
        let n = p.dose.height * p.dose.width;
        for i in 0..n {
            if p.body[i] == 0.0 {
                assert_eq!(p.dose.data[i], 0.0);
            }
            if p.structure.channel(CH_PTV)[i] > 0.0 {
                assert_eq!(p.dose.data[i], 1.0);
            }
            assert!(p.dose.data[i] >= 0.0 && p.dose.data[i] <= 1.2);
        }
    }

    #[test]
    fn empty_target_is_rejected() {
        let err = dose_from_masks(&[0.0; 16], &[1.0; 16], 4, 4, 3.0).unwrap_err();
        assert!(matches!(err, Error::EmptyMask { .. }));
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let spec = PhantomSpec::desk(17);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&spec.with_seed(18)).unwrap();
        assert_ne!(a.structure.data, c.structure.data);
    }

    #[test]
    fn mask_invariants_hold_across_seeds() {
        for seed in 0..12 {
            let p = generate_phantom(&PhantomSpec::desk(seed)).unwrap();
            let n = p.structure.height * p.structure.width;
            let ptv = p.structure.channel(CH_PTV);
            let cord = p.structure.channel(CH_CORD);
            assert!(ptv.iter().any(|v| *v > 0.0), "seed {seed}: empty target");
            for c in [CH_PTV, CH_HEART, CH_LUNGS, CH_CORD] {
                for i in 0..n {
                    let v = p.structure.channel(c)[i];
                    assert!(v == 0.0 || v == 1.0, "seed {seed}: non-binary mask");
                    if v > 0.0 {
                        assert!(p.body[i] > 0.0, "seed {seed}: organ outside body");
                    }
                }
            }
            for i in 0..n {
                assert!(
                    !(ptv[i] > 0.0 && cord[i] > 0.0),
                    "seed {seed}: target touches cord"
                );
            }
            // target overlaps at most one organ channel
            let heart = p.structure.channel(CH_HEART);
            let lungs = p.structure.channel(CH_LUNGS);
            let organs: [&[f64]; 3] = [heart, lungs, cord];
            let overlapping = organs
                .iter()
                .filter(|m| m.iter().zip(ptv.iter()).any(|(a, b)| *a > 0.0 && *b > 0.0))
                .count();
            assert!(overlapping <= 1, "seed {seed}: target overlaps {overlapping} organs");
        }
    }

    #[test]
    fn dose_is_nonincreasing_along_rays_leaving_the_target() {
        for seed in 0..8u64 {
            let p = generate_phantom(&PhantomSpec::desk(seed)).unwrap();
            let (h, w) = (p.dose.height, p.dose.width);
            let ptv = p.structure.channel(CH_PTV);
            // centroid of the target mask
            let (mut cx, mut cy, mut count) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    if ptv[y * w + x] > 0.0 {
                        cx += x as f64;
                        cy += y as f64;
                        count += 1.0;
                    }
                }
            }
            let (cx, cy) = ((cx / count).round() as i64, (cy / count).round() as i64);
            for (dx, dy) in [
                (1i64, 0i64),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ] {
                let mut prev = f64::INFINITY;
                let mut k = 0;
                loop {
                    k += 1;
                    let (x, y) = (cx + k * dx, cy + k * dy);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        break;
                    }
                    let i = y as usize * w + x as usize;
                    if p.body[i] == 0.0 {
                        break;
                    }
                    if ptv[i] > 0.0 {
                        continue; // still inside the target
                    }
                    let v = p.dose.data[i];
                    assert!(
                        v <= prev + 1e-12,
                        "seed {seed} ray ({dx},{dy}) step {k}: {v} > {prev}"
                    );
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn intensity_channel_stays_in_unit_range() {
        let p = generate_phantom(&PhantomSpec::desk(5)).unwrap();
        for v in p.structure.channel(CH_INTENSITY) {
            assert!(*v >= 0.0 && *v <= 1.0);
        }
    }
}
