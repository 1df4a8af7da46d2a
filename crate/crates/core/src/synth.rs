//! Synthetic cohorts and phantom radiographs.
//!
//! Clinical features follow class-conditional truncated normals whose means
//! match the cohort description of the original study; KL grades follow the
//! maximum-entropy distribution on 0..=4 with the class mean and standard
//! deviation. Phantoms are 16-bit lateral-view cartoons: a bright elliptical
//! patella above a femoral band, with osteophyte spurs, joint-space
//! narrowing, subchondral sclerosis and cysts drawn from the knee's
//! patellofemoral grades.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::datamodel::{pfoa_label, DatasetManifest, KneeRecord, PatellofemoralGrades, Sex, Side, Visit};
use crate::imaging::{BitDepth, Image, STANDARD_SPACING_MM};
use crate::rng;
use crate::roi::RoiBox;
use crate::{Error, Result};

/// Normal distribution restricted to `[lo, hi]`, described by the mean and
/// standard deviation it should have after truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncated {
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Truncated {
    pub const fn new(mean: f64, sd: f64, lo: f64, hi: f64) -> Self {
        Truncated { mean, sd, lo, hi }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.sd > 0.0) || !(self.lo < self.hi) || !(self.lo < self.mean && self.mean < self.hi) {
            return Err(Error::validation(format!("{name}: invalid truncated normal {self:?}")));
        }
        Ok(())
    }

    /// Mean of `N(mu, sd)` truncated to `[lo, hi]`.
    fn truncated_mean(&self, mu: f64) -> f64 {
        let n = Normal::standard();
        let a = (self.lo - mu) / self.sd;
        let b = (self.hi - mu) / self.sd;
        let z = n.cdf(b) - n.cdf(a);
        if z < 1e-300 {
            return if mu < self.lo { self.lo } else { self.hi };
        }
        mu + self.sd * (n.pdf(a) - n.pdf(b)) / z
    }

    /// Location of the untruncated normal whose truncation has `self.mean`.
    pub fn location(&self) -> f64 {
        let (mut lo, mut hi) = (self.lo - 10.0 * self.sd, self.hi + 10.0 * self.sd);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.truncated_mean(mid) < self.mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn sampler(&self) -> TruncatedSampler {
        let mu = self.location();
        let n = Normal::standard();
        TruncatedSampler {
            mu,
            sd: self.sd,
            lo: self.lo,
            hi: self.hi,
            p_lo: n.cdf((self.lo - mu) / self.sd),
            p_hi: n.cdf((self.hi - mu) / self.sd),
        }
    }

    fn lerp(a: &Truncated, b: &Truncated, t: f64) -> Truncated {
        Truncated {
            mean: a.mean + t * (b.mean - a.mean),
            sd: a.sd + t * (b.sd - a.sd),
            lo: a.lo + t * (b.lo - a.lo),
            hi: a.hi + t * (b.hi - a.hi),
        }
    }
}

struct TruncatedSampler {
    mu: f64,
    sd: f64,
    lo: f64,
    hi: f64,
    p_lo: f64,
    p_hi: f64,
}

impl TruncatedSampler {
    fn sample(&self, r: &mut rng::Rng) -> f64 {
        let u = self.p_lo + r.random::<f64>() * (self.p_hi - self.p_lo);
        let x = self.mu + self.sd * Normal::standard().inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
        x.clamp(self.lo, self.hi)
    }
}

/// Distribution on `0..=4` maximising entropy subject to the given mean and
/// standard deviation.
pub fn max_entropy_kl(mean: f64, sd: f64) -> Result<[f64; 5]> {
    if !(0.0..=4.0).contains(&mean) || !(sd > 0.0) {
        return Err(Error::validation(format!("KL mean {mean} / sd {sd} out of range")));
    }
    let target = [mean, sd * sd + mean * mean];
    let probs = |l: [f64; 2]| -> [f64; 5] {
        let w: Vec<f64> = (0..5).map(|k| l[0] * k as f64 + l[1] * (k * k) as f64).collect();
        let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        std::array::from_fn(|k| e[k] / z)
    };
    // Newton on the convex dual log Z(l) - l . target
    let dual = |l: [f64; 2]| -> f64 {
        let w: Vec<f64> = (0..5).map(|k| l[0] * k as f64 + l[1] * (k * k) as f64).collect();
        let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + w.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - l[0] * target[0] - l[1] * target[1]
    };
    let mut l = [0.0, 0.0];
    for _ in 0..200 {
        let p = probs(l);
        let mom = |f: &dyn Fn(f64) -> f64| -> f64 { (0..5).map(|k| p[k] * f(k as f64)).sum() };
        let m1 = mom(&|k| k);
        let m2 = mom(&|k| k * k);
        let m3 = mom(&|k| k * k * k);
        let m4 = mom(&|k| k * k * k * k);
        let g = [m1 - target[0], m2 - target[1]];
        if g[0].abs() < 1e-13 && g[1].abs() < 1e-12 {
            return Ok(p);
        }
        let h = [[m2 - m1 * m1, m3 - m1 * m2], [m3 - m1 * m2, m4 - m2 * m2]];
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if !(det.abs() > 1e-300) {
            break;
        }
        let step = [
            (h[1][1] * g[0] - h[0][1] * g[1]) / det,
            (h[0][0] * g[1] - h[1][0] * g[0]) / det,
        ];
        let f0 = dual(l);
        let mut t = 1.0;
        while t > 1e-12 {
            let cand = [l[0] - t * step[0], l[1] - t * step[1]];
            if dual(cand) <= f0 {
                l = cand;
                break;
            }
            t *= 0.5;
        }
        if t <= 1e-12 {
            break;
        }
    }
    let p = probs(l);
    let m1: f64 = (0..5).map(|k| p[k] * k as f64).sum();
    if (m1 - mean).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "no KL distribution with mean {mean}, sd {sd}"
        )));
    }
    Ok(p)
}

/// Per-class clinical distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub age: Truncated,
    pub bmi: Truncated,
    pub womac_total: Truncated,
    pub kl_mean: f64,
    pub kl_sd: f64,
}

impl ClassProfile {
    pub fn non_pfoa() -> Self {
        ClassProfile {
            age: Truncated::new(64.7, 8.3, 50.0, 86.0),
            bmi: Truncated::new(30.0, 5.5, 16.0, 62.4),
            womac_total: Truncated::new(16.6, 16.0, 0.0, 91.0),
            kl_mean: 1.1,
            kl_sd: 1.3,
        }
    }

    pub fn pfoa() -> Self {
        ClassProfile {
            age: Truncated::new(66.2, 8.1, 50.0, 86.0),
            bmi: Truncated::new(32.7, 6.6, 19.7, 66.1),
            womac_total: Truncated::new(27.6, 17.8, 0.0, 92.0),
            kl_mean: 2.5,
            kl_sd: 1.2,
        }
    }

    fn validate(&self) -> Result<()> {
        self.age.validate("age")?;
        self.bmi.validate("bmi")?;
        self.womac_total.validate("womac_total")?;
        if !(self.kl_sd > 0.0) {
            return Err(Error::validation("KL sd must be > 0"));
        }
        Ok(())
    }

    /// Moves `self` a fraction `t` of the way towards `other`.
    fn towards(&self, other: &ClassProfile, t: f64) -> ClassProfile {
        ClassProfile {
            age: Truncated::lerp(&self.age, &other.age, t),
            bmi: Truncated::lerp(&self.bmi, &other.bmi, t),
            womac_total: Truncated::lerp(&self.womac_total, &other.womac_total, t),
            kl_mean: self.kl_mean + t * (other.kl_mean - self.kl_mean),
            kl_sd: self.kl_sd + t * (other.kl_sd - self.kl_sd),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// 1 (left knee only) or 2.
    pub knees_per_subject: usize,
    /// Fraction of subjects with PFOA; both knees of a subject share it.
    pub prevalence: f64,
    pub non_pfoa: ClassProfile,
    pub pfoa: ClassProfile,
    /// Scales the clinical class differences: 0 gives both classes the
    /// non-PFOA distributions, 1 the profiles above.
    pub clinical_effect: f64,
    /// Scales every label-dependent image feature; 0 removes them all.
    pub image_effect: f64,
    pub female_fraction: f64,
    pub bmi_missing_rate: f64,
    /// Native pixel spacing is drawn uniformly from this range (mm).
    pub spacing_range: (f64, f64),
    /// Field of view of the phantom, height x width in mm.
    pub field_mm: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 1000,
            knees_per_subject: 2,
            prevalence: 0.19,
            non_pfoa: ClassProfile::non_pfoa(),
            pfoa: ClassProfile::pfoa(),
            clinical_effect: 1.0,
            image_effect: 1.0,
            female_fraction: 0.6,
            bmi_missing_rate: 0.02,
            spacing_range: (0.16, 0.26),
            field_mm: (56.0, 44.0),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || !(1..=2).contains(&self.knees_per_subject) {
            return Err(Error::validation("need >= 1 subject and 1 or 2 knees per subject"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::validation("prevalence must be in (0, 1)"));
        }
        if !unit(self.female_fraction) || !unit(self.bmi_missing_rate) {
            return Err(Error::validation("fractions must be in [0, 1]"));
        }
        if !(self.clinical_effect >= 0.0) || !(self.image_effect >= 0.0) {
            return Err(Error::validation("effect sizes must be >= 0"));
        }
        let (s0, s1) = self.spacing_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(Error::validation("invalid spacing range"));
        }
        if !(self.field_mm.0 >= 40.0 && self.field_mm.1 >= 30.0) {
            return Err(Error::validation("field of view must be at least 40 x 30 mm"));
        }
        self.non_pfoa.validate()?;
        self.pfoa.validate()
    }

    /// Clinical profile actually used for `label`.
    pub fn profile(&self, label: bool) -> ClassProfile {
        if label {
            self.non_pfoa.towards(&self.pfoa, self.clinical_effect)
        } else {
            self.non_pfoa.clone()
        }
    }
}

fn categorical(r: &mut rng::Rng, p: &[f64]) -> usize {
    let u = r.random::<f64>();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// Patellofemoral grades that produce `label` under the PFOA rule.
pub fn sample_grades(r: &mut rng::Rng, label: bool) -> PatellofemoralGrades {
    let g = if label {
        if r.random::<f64>() < 0.7 {
            PatellofemoralGrades::new(
                2 + categorical(r, &[0.65, 0.35]) as u8,
                categorical(r, &[0.4, 0.35, 0.2, 0.05]) as u8,
                categorical(r, &[0.5, 0.3, 0.15, 0.05]) as u8,
                categorical(r, &[0.7, 0.2, 0.1]) as u8,
            )
        } else {
            let osteophyte = categorical(r, &[0.4, 0.6]) as u8;
            let mut sclerosis = categorical(r, &[0.5, 0.35, 0.15]) as u8;
            let cysts = categorical(r, &[0.7, 0.25, 0.05]) as u8;
            if osteophyte == 0 && sclerosis == 0 && cysts == 0 {
                sclerosis = 1;
            }
            PatellofemoralGrades::new(
                osteophyte,
                1 + categorical(r, &[0.55, 0.35, 0.1]) as u8,
                sclerosis,
                cysts,
            )
        }
    } else {
        let osteophyte = categorical(r, &[0.65, 0.35]) as u8;
        let sclerosis = categorical(r, &[0.85, 0.15]) as u8;
        let cysts = categorical(r, &[0.93, 0.07]) as u8;
        let jsn = if osteophyte == 0 && sclerosis == 0 && cysts == 0 {
            categorical(r, &[0.7, 0.25, 0.05]) as u8
        } else {
            0
        };
        PatellofemoralGrades::new(osteophyte, jsn, sclerosis, cysts)
    };
    debug_assert_eq!(pfoa_label(&g).ok(), Some(label));
    g
}

pub fn image_file_name(subject: &str, side: Side, visit: Visit) -> String {
    format!("{subject}_{}_{}.png", side.code(), visit.code())
}

/// Baseline-visit cohort. Each subject draws one PFOA status shared by
/// their knees, and one age, sex and BMI; WOMAC, KL and patellofemoral
/// grades are drawn per knee.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let profiles = [cfg.profile(false), cfg.profile(true)];
    let samplers: Vec<_> = profiles
        .iter()
        .map(|p| (p.age.sampler(), p.bmi.sampler(), p.womac_total.sampler()))
        .collect();
    let kl: Vec<[f64; 5]> = profiles
        .iter()
        .map(|p| max_entropy_kl(p.kl_mean, p.kl_sd))
        .collect::<Result<_>>()?;
    let base = rng::derive(cfg.seed, "cohort");
    let width = cfg.n_subjects.to_string().len().max(5);
    let sides: &[Side] = if cfg.knees_per_subject == 2 {
        &[Side::Left, Side::Right]
    } else {
        &[Side::Left]
    };

    let mut records = Vec::with_capacity(cfg.n_subjects * cfg.knees_per_subject);
    for s in 0..cfg.n_subjects {
        let mut r = rng::stream(base, s as u64);
        let label = r.random::<f64>() < cfg.prevalence;
        let c = usize::from(label);
        let (age_s, bmi_s, womac_s) = &samplers[c];
        let subject_id = format!("S{:0width$}", s + 1);
        let age = round1(age_s.sample(&mut r));
        let sex = if r.random::<f64>() < cfg.female_fraction {
            Sex::Female
        } else {
            Sex::Male
        };
        let bmi = round1(bmi_s.sample(&mut r));
        let bmi = (r.random::<f64>() >= cfg.bmi_missing_rate).then_some(bmi);
        for &side in sides {
            let womac = round1(womac_s.sample(&mut r));
            let pain = (womac * 20.0 / 96.0 + 1.5 * normal(&mut r)).round().clamp(0.0, 20.0);
            let grades = sample_grades(&mut r, label);
            records.push(KneeRecord {
                subject_id: subject_id.clone(),
                side,
                visit: Visit::Baseline,
                age,
                sex,
                bmi,
                womac_total: Some(womac),
                womac_pain: Some(pain),
                kl_grade: Some(categorical(&mut r, &kl[c]) as i32),
                pf_grades: Some(grades),
                pfoa: Some(pfoa_label(&grades)?),
                image_path: Some(image_file_name(&subject_id, side, Visit::Baseline)),
            });
        }
    }
    DatasetManifest::new(
        records,
        format!(
            "synthetic cohort: seed {}, {} subjects, prevalence {}, clinical effect {}, image effect {}",
            cfg.seed, cfg.n_subjects, cfg.prevalence, cfg.clinical_effect, cfg.image_effect
        ),
        STANDARD_SPACING_MM,
    )
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn normal(r: &mut rng::Rng) -> f64 {
    r.sample(rand_distr::StandardNormal)
}

/// A rendered radiograph and the patella's bounding box in its pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Image,
    pub truth: RoiBox,
}

/// Spur length in mm for each osteophyte grade.
const SPUR_MM: [f64; 4] = [0.0, 1.0, 2.6, 3.6];
/// Joint-space loss in mm for each JSN grade.
const JSN_MM: [f64; 4] = [0.0, 1.2, 2.0, 2.6];

fn smooth_inside(d: f64, px: f64) -> f64 {
    (0.5 - d / px).clamp(0.0, 1.0)
}

/// Renders the lateral-view phantom for one knee. Requires PF grades.
/// The same record and configuration give the same pixels.
pub fn generate_phantom(record: &KneeRecord, cfg: &SynthConfig) -> Result<Phantom> {
    let g = record
        .pf_grades
        .ok_or_else(|| Error::validation(format!("{} has no patellofemoral grades", record.key())))?;
    g.validate()?;
    let mut r = rng::seeded(rng::derive(cfg.seed, &format!("phantom/{}", record.key())));
    let (s0, s1) = cfg.spacing_range;
    let spacing = if s1 > s0 {
        s0 + (s1 - s0) * r.random::<f64>()
    } else {
        s0
    };
    let (field_h, field_w) = cfg.field_mm;
    let h = (field_h / spacing).round() as usize;
    let w = (field_w / spacing).round() as usize;
    let e = cfg.image_effect;

    let rx = 5.2 + 0.8 * r.random::<f64>();
    let ry = 5.8 + 0.8 * r.random::<f64>();
    let cx = field_w / 2.0 + (r.random::<f64>() - 0.5) * (field_w - 2.0 * rx - 16.0);
    let cy = field_h / 2.0 - 4.0 + (r.random::<f64>() - 0.5) * 8.0;
    let gap = 3.0 + 0.4 * r.random::<f64>() - e * JSN_MM[usize::from(g.jsn)];
    let femur_top = cy + ry + gap.max(0.3);
    let femur_curve = 0.015 + 0.01 * r.random::<f64>();

    let spur_len = e * SPUR_MM[usize::from(g.osteophyte)];
    let spur_half_base = 1.1;
    let rim = e * 0.45 * f64::from(g.sclerosis);
    let mut cysts: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let a = r.random::<f64>() * std::f64::consts::TAU;
            let rad = 0.55 * r.random::<f64>().sqrt();
            (
                cx + rad * rx * a.cos(),
                cy + rad * ry * a.sin(),
                e * (0.7 + 0.3 * r.random::<f64>()),
            )
        })
        .collect();
    cysts.truncate(usize::from(g.cysts));

    let background = 9000.0 + 2000.0 * r.random::<f64>();
    let (gx, gy) = (r.random::<f64>() - 0.5, r.random::<f64>() - 0.5);
    let gradient = 4000.0 * r.random::<f64>();
    let bone = 15000.0 + 3000.0 * r.random::<f64>();
    let femur_level = 13000.0 + 3000.0 * r.random::<f64>();
    let noise_sd = 500.0 + 300.0 * r.random::<f64>();

    let mut values = Vec::with_capacity(w * h);
    for py in 0..h {
        for px in 0..w {
            let x = (px as f64 + 0.5) * spacing;
            let y = (py as f64 + 0.5) * spacing;
            let mut v = background + gradient * (gx * (x / field_w - 0.5) + gy * (y / field_h - 0.5));

            let dx = (x - cx) / rx;
            let dy = (y - cy) / ry;
            let rho = (dx * dx + dy * dy).sqrt();
            let d = (rho - 1.0) * rx.min(ry);
            let mut patella = smooth_inside(d, spacing);
            // spurs: triangles growing out of the upper and lower poles
            if spur_len > 0.0 {
                let out = (y - cy).abs() - ry;
                if out > -0.5 && out < spur_len {
                    let half = spur_half_base * (1.0 - out.max(0.0) / spur_len);
                    let tri = smooth_inside((x - cx).abs() - half, spacing);
                    patella = patella.max(tri);
                }
            }
            v += bone * patella;
            if rim > 0.0 && d < 0.0 && d > -rim {
                v += 0.3 * bone * smooth_inside(-d - rim, spacing).min(1.0);
            }
            for &(ux, uy, strength) in &cysts {
                let cd = ((x - ux).powi(2) + (y - uy).powi(2)).sqrt() - 0.7 * strength;
                v -= 0.6 * bone * smooth_inside(cd, spacing) * strength.min(1.0);
            }

            let top = femur_top + femur_curve * (x - cx).powi(2);
            v += femur_level * smooth_inside(top - y, spacing);

            v += noise_sd * normal(&mut r);
            values.push(v.round().clamp(0.0, 65535.0) as u16);
        }
    }
    let image = Image::new(w, h, spacing, BitDepth::Sixteen, values)?;
    let truth = RoiBox::new(
        ((cx - rx) / spacing).floor() as i32,
        ((cy - ry) / spacing).floor() as i32,
        (2.0 * rx / spacing).round() as u32,
        (2.0 * ry / spacing).round() as u32,
    );
    Ok(match record.side {
        Side::Left => Phantom { image, truth },
        Side::Right => Phantom {
            truth: crate::imaging::orient_box_left(truth, w, Side::Right),
            image: crate::imaging::flip_horizontal(&image),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{orient_box_left, orient_left};
    use proptest::prelude::*;

    #[test]
    fn truncated_location_hits_the_mean() {
        for t in [
            ClassProfile::non_pfoa().womac_total,
            ClassProfile::pfoa().bmi,
            ClassProfile::pfoa().age,
        ] {
            let mu = t.location();
            assert!((t.truncated_mean(mu) - t.mean).abs() < 1e-9);
        }
        // numerical integration as an independent check
        let t = ClassProfile::non_pfoa().womac_total;
        let mu = t.location();
        let n = Normal::new(mu, t.sd).unwrap();
        let steps = 200_000;
        let hstep = (t.hi - t.lo) / steps as f64;
        let (mut mass, mut first) = (0.0, 0.0);
        for i in 0..steps {
            let x = t.lo + (i as f64 + 0.5) * hstep;
            mass += n.pdf(x) * hstep;
            first += x * n.pdf(x) * hstep;
        }
        assert!((first / mass - t.mean).abs() < 1e-6);
    }

    #[test]
    fn max_entropy_kl_matches_moments() {
        for (m, s) in [(1.1, 1.3), (2.5, 1.2), (2.0, 0.5)] {
            let p = max_entropy_kl(m, s).unwrap();
            let mean: f64 = (0..5).map(|k| p[k] * k as f64).sum();
            let var: f64 = (0..5).map(|k| p[k] * (k as f64 - mean).powi(2)).sum();
            assert!((mean - m).abs() < 1e-9);
            assert!((var.sqrt() - s).abs() < 1e-6);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(max_entropy_kl(5.0, 1.0).is_err());
    }

    #[test]
    fn grades_never_contradict_labels() {
        let mut r = rng::seeded(1);
        for i in 0..5000 {
            let label = i % 2 == 0;
            assert_eq!(pfoa_label(&sample_grades(&mut r, label)).unwrap(), label);
        }
    }

    #[test]
    fn class_moments_match_targets() {
        let cfg = SynthConfig {
            n_subjects: 5000,
            seed: 3,
            ..SynthConfig::default()
        };
        let m = generate_cohort(&cfg).unwrap();
        assert_eq!(m.len(), 10_000);
        for label in [false, true] {
            let target = cfg.profile(label);
            let knees: Vec<&KneeRecord> = m.records.iter().filter(|r| r.pfoa == Some(label)).collect();
            // subject-level features: one value per subject
            let subjects: Vec<&KneeRecord> = knees.iter().copied().filter(|r| r.side == Side::Left).collect();
            let check = |name: &str, xs: Vec<f64>, mean: f64| {
                let n = xs.len() as f64;
                let mu = xs.iter().sum::<f64>() / n;
                let sd = (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                let se = sd / n.sqrt();
                assert!(
                    (mu - mean).abs() < 2.0 * se,
                    "{name} ({label}): {mu} vs {mean} (se {se})"
                );
            };
            check("age", subjects.iter().map(|r| r.age).collect(), target.age.mean);
            check("bmi", subjects.iter().filter_map(|r| r.bmi).collect(), target.bmi.mean);
            check(
                "womac",
                knees.iter().filter_map(|r| r.womac_total).collect(),
                target.womac_total.mean,
            );
            check(
                "kl",
                knees.iter().map(|r| r.kl_grade.unwrap() as f64).collect(),
                target.kl_mean,
            );
        }
        let prevalence = m.records.iter().filter(|r| r.pfoa == Some(true)).count() as f64 / m.len() as f64;
        assert!((prevalence - 0.19).abs() < 0.02);
        for r in &m.records {
            assert_eq!(r.pfoa, Some(pfoa_label(&r.pf_grades.unwrap()).unwrap()));
        }
    }

    #[test]
    fn subjects_are_coherent_and_generation_is_deterministic() {
        let cfg = SynthConfig {
            n_subjects: 50,
            seed: 9,
            ..SynthConfig::default()
        };
        let a = generate_cohort(&cfg).unwrap();
        assert_eq!(a, generate_cohort(&cfg).unwrap());
        for pair in a.records.chunks(2) {
            assert_eq!(pair[0].subject_id, pair[1].subject_id);
            assert_eq!(
                (pair[0].age, pair[0].sex, pair[0].bmi),
                (pair[1].age, pair[1].sex, pair[1].bmi)
            );
        }
        let b = generate_cohort(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_clinical_effect_gives_identical_profiles() {
        let cfg = SynthConfig {
            clinical_effect: 0.0,
            ..SynthConfig::default()
        };
        assert_eq!(cfg.profile(true), cfg.profile(false));
    }

    fn knee(side: Side, grades: PatellofemoralGrades) -> KneeRecord {
        KneeRecord {
            subject_id: "S00001".into(),
            side,
            visit: Visit::Baseline,
            age: 60.0,
            sex: Sex::Female,
            bmi: None,
            womac_total: None,
            womac_pain: None,
            kl_grade: None,
            pfoa: Some(pfoa_label(&grades).unwrap()),
            pf_grades: Some(grades),
            image_path: None,
        }
    }

    #[test]
    fn phantom_is_deterministic_and_boxed() {
        let cfg = SynthConfig::default();
        let rec = knee(Side::Left, PatellofemoralGrades::new(3, 2, 1, 1));
        let a = generate_phantom(&rec, &cfg).unwrap();
        assert_eq!(a, generate_phantom(&rec, &cfg).unwrap());
        assert_eq!(a.image.depth(), BitDepth::Sixteen);
        let (cx, cy) = a.truth.center();
        // the patella centre is bright compared with the image corner
        assert!(a.image.get(cx as usize, cy as usize) > a.image.get(1, 1) + 8000);
        let mm = f64::from(a.truth.w) * a.image.spacing();
        assert!((10.0..=12.5).contains(&mm));
    }

    #[test]
    fn right_knees_are_mirrored() {
        let cfg = SynthConfig::default();
        let left = knee(Side::Left, PatellofemoralGrades::new(0, 0, 0, 0));
        let right = KneeRecord {
            side: Side::Right,
            ..left.clone()
        };
        let p = generate_phantom(&right, &cfg).unwrap();
        let back = orient_left(&p.image, Side::Right);
        let b = orient_box_left(p.truth, p.image.width(), Side::Right);
        let (cx, cy) = b.center();
        assert!(back.get(cx as usize, cy as usize) > back.get(1, 1) + 8000);
        assert!(generate_phantom(
            &KneeRecord {
                pf_grades: None,
                ..left
            },
            &cfg
        )
        .is_err());
    }

    #[test]
    fn zero_image_effect_removes_label_features() {
        let cfg = SynthConfig {
            image_effect: 0.0,
            ..SynthConfig::default()
        };
        // with no effect the pixels depend only on the record key
        let sick = knee(Side::Left, PatellofemoralGrades::new(3, 3, 3, 3));
        let healthy = knee(Side::Left, PatellofemoralGrades::new(0, 0, 0, 0));
        assert_eq!(
            generate_phantom(&sick, &cfg).unwrap().image,
            generate_phantom(&healthy, &cfg).unwrap().image
        );
    }

    #[test]
    fn osteophytes_extend_the_poles() {
        let cfg = SynthConfig::default();
        let plain = generate_phantom(&knee(Side::Left, PatellofemoralGrades::new(0, 0, 0, 0)), &cfg).unwrap();
        let spur = generate_phantom(&knee(Side::Left, PatellofemoralGrades::new(3, 0, 0, 0)), &cfg).unwrap();
        let (cx, _) = plain.truth.center();
        let above = (plain.truth.y - 8) as usize;
        assert!(spur.image.get(cx as usize, above) > plain.image.get(cx as usize, above) + 8000);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn cohort_labels_follow_the_rule(seed in 0u64..1000, n in 1usize..40) {
            let m = generate_cohort(&SynthConfig { n_subjects: n, seed, ..SynthConfig::default() }).unwrap();
            prop_assert_eq!(m.len(), 2 * n);
            for r in &m.records {
                prop_assert_eq!(r.pfoa, Some(pfoa_label(&r.pf_grades.unwrap()).unwrap()));
            }
        }
    }
}
