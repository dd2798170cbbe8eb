//! Progressive compression schedulers.
//!
//! Three curricula over training steps `t = 0..=T`:
//!
//! * TCD — token-wise: the student ratio is drawn from a uniform window
//!   that linearly widens and shifts toward aggressive compression, while
//!   the teacher trails the student by a growing gap.
//! * LCD — layer-wise: the compression layer walks from the deepest layer
//!   down to `l_min`, with the ratio drawn from a fixed window.
//! * ICD — layer-wise iterated TCD: one TCD ramp per layer block, ratio
//!   reset at each block boundary.
//!
//! A fixed-ratio schedule (constant `r`, zero gap) covers the
//! no-progressive-ratio ablation; LCD built with `n_layers == l_min`
//! degenerates to a fixed compression layer for the no-progressive-layer
//! ablation.

use crate::error::{Error, Result};
use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Per-step scheduler output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub r_stu: f64,
    pub r_tea: f64,
    pub layer: usize,
    pub gap: f64,
}

impl ScheduleState {
    fn from_student(r_stu: f64, gap: f64, layer: usize) -> Self {
        ScheduleState { r_stu, r_tea: (r_stu - gap).max(0.0), layer, gap }
    }
}

/// Linear gap ramp from `delta_min` at `t = 0` to `delta_max` at `t = T`.
pub fn gap(t: usize, total_steps: usize, delta_min: f64, delta_max: f64) -> Result<f64> {
    if t > total_steps {
        return Err(Error::Schedule(format!("step {t} beyond horizon {total_steps}")));
    }
    let beta = progress(t, total_steps);
    Ok(delta_min + beta * (delta_max - delta_min))
}

/// `t / T` with the convention that `T` is the final step index, so
/// endpoints are exact; a zero-length horizon counts as completed.
fn progress(t: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        1.0
    } else {
        t as f64 / total_steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcdSchedule {
    pub total_steps: usize,
    /// Initial upper edge of the student ratio window.
    pub eps: f64,
    pub r_max_final: f64,
    pub r_min_final: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub fixed_layer: usize,
}

impl Default for TcdSchedule {
    fn default() -> Self {
        TcdSchedule {
            total_steps: 1,
            eps: 0.05,
            r_max_final: 0.90,
            r_min_final: 0.50,
            delta_min: 0.0,
            delta_max: 0.30,
            fixed_layer: 2,
        }
    }
}

impl TcdSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.eps && self.eps <= self.r_max_final && self.r_max_final <= 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 <= eps <= r_max_final <= 1, got eps={} r_max_final={}",
                self.eps, self.r_max_final
            )));
        }
        if !(0.0 <= self.r_min_final && self.r_min_final <= self.r_max_final) {
            return Err(Error::Schedule(format!(
                "need 0 <= r_min_final <= r_max_final, got {}",
                self.r_min_final
            )));
        }
        if !(0.0 <= self.delta_min && self.delta_min <= self.delta_max && self.delta_max < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 <= delta_min <= delta_max < 1, got {} / {}",
                self.delta_min, self.delta_max
            )));
        }
        if self.fixed_layer == 0 {
            return Err(Error::Schedule("fixed_layer is 1-based".into()));
        }
        Ok(())
    }

    /// Ratio window `[r_min_t, r_max_t]` at step `t`.
    pub fn window(&self, t: usize) -> (f64, f64) {
        let beta = progress(t, self.total_steps);
        let r_max_t = self.eps + beta * (self.r_max_final - self.eps);
        let r_min_t = beta * self.r_min_final;
        (r_min_t, r_max_t)
    }

    pub fn sample(&self, t: usize, rng: &mut StdRng) -> Result<ScheduleState> {
        let (lo, hi) = self.window(t);
        let g = gap(t, self.total_steps, self.delta_min, self.delta_max)?;
        let r_stu = rng.random_range(lo..=hi);
        Ok(ScheduleState::from_student(r_stu, g, self.fixed_layer))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcdSchedule {
    pub total_steps: usize,
    pub n_layers: usize,
    pub l_min: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl LcdSchedule {
    pub fn defaults(total_steps: usize, n_layers: usize) -> Self {
        LcdSchedule {
            total_steps,
            n_layers,
            l_min: 2,
            r_min: 0.2,
            r_max: 0.9,
            delta_min: 0.0,
            delta_max: 0.30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.l_min && self.l_min <= self.n_layers) {
            return Err(Error::Schedule(format!(
                "need 1 <= l_min <= n_layers, got l_min={} n_layers={}",
                self.l_min, self.n_layers
            )));
        }
        if !(0.0 <= self.r_min && self.r_min <= self.r_max && self.r_max <= 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 <= r_min <= r_max <= 1, got {} / {}",
                self.r_min, self.r_max
            )));
        }
        if !(0.0 <= self.delta_min && self.delta_min <= self.delta_max && self.delta_max < 1.0) {
            return Err(Error::Schedule("invalid gap bounds".into()));
        }
        Ok(())
    }

    /// Deep-to-shallow layer walk: `round_half_up(L - beta * (L - l_min))`.
    pub fn layer(&self, t: usize) -> Result<usize> {
        if t > self.total_steps {
            return Err(Error::Schedule(format!("step {t} beyond horizon {}", self.total_steps)));
        }
        let beta = progress(t, self.total_steps);
        let raw = self.n_layers as f64 - beta * (self.n_layers - self.l_min) as f64;
        let l = (raw + 0.5).floor() as usize;
        Ok(l.clamp(self.l_min, self.n_layers))
    }

    pub fn sample(&self, t: usize, rng: &mut StdRng) -> Result<ScheduleState> {
        let layer = self.layer(t)?;
        let g = gap(t, self.total_steps, self.delta_min, self.delta_max)?;
        let r_stu = rng.random_range(self.r_min..=self.r_max);
        Ok(ScheduleState::from_student(r_stu, g, layer))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcdSchedule {
    pub total_steps: usize,
    pub n_layers: usize,
    pub l_min: usize,
    pub eps: f64,
    pub r_max_final: f64,
    pub r_min_final: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    /// When false (default) the gap ramp restarts with each layer block,
    /// like the ratio; when true it follows global progress.
    pub gap_global: bool,
}

impl IcdSchedule {
    pub fn defaults(total_steps: usize, n_layers: usize) -> Self {
        IcdSchedule {
            total_steps,
            n_layers,
            l_min: 2,
            eps: 0.05,
            r_max_final: 0.90,
            r_min_final: 0.50,
            delta_min: 0.0,
            delta_max: 0.30,
            gap_global: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.l_min && self.l_min <= self.n_layers) {
            return Err(Error::Schedule(format!(
                "need 1 <= l_min <= n_layers, got l_min={} n_layers={}",
                self.l_min, self.n_layers
            )));
        }
        let blocks = self.n_layers - self.l_min + 1;
        if self.total_steps < blocks {
            return Err(Error::Schedule(format!(
                "{} steps cannot cover {} layer blocks",
                self.total_steps, blocks
            )));
        }
        self.as_block_tcd(self.total_steps).validate()
    }

    pub fn blocks(&self) -> usize {
        self.n_layers - self.l_min + 1
    }

    /// Block boundaries partition `[0, T)` into `blocks()` near-equal runs.
    fn block_bounds(&self, b: usize) -> (usize, usize) {
        let k = self.blocks();
        let start = b * self.total_steps / k;
        let end = (b + 1) * self.total_steps / k;
        (start, end)
    }

    fn as_block_tcd(&self, block_steps: usize) -> TcdSchedule {
        TcdSchedule {
            total_steps: block_steps,
            eps: self.eps,
            r_max_final: self.r_max_final,
            r_min_final: self.r_min_final,
            delta_min: self.delta_min,
            delta_max: self.delta_max,
            fixed_layer: 1, // overwritten per block
        }
    }

    pub fn sample(&self, t: usize, rng: &mut StdRng) -> Result<ScheduleState> {
        if t > self.total_steps {
            return Err(Error::Schedule(format!("step {t} beyond horizon {}", self.total_steps)));
        }
        let k = self.blocks();
        // Blocks walk the layer from n_layers down to l_min; t == T lands on
        // the final block at full progress.
        let b = if t >= self.total_steps {
            k - 1
        } else {
            (t * k / self.total_steps).min(k - 1)
        };
        let (start, end) = self.block_bounds(b);
        let block_steps = end - start;
        let t_local = t - start;
        let layer = self.n_layers - b;

        let tcd = self.as_block_tcd(block_steps);
        let (lo, hi) = tcd.window(t_local);
        let g = if self.gap_global {
            gap(t, self.total_steps, self.delta_min, self.delta_max)?
        } else {
            gap(t_local, block_steps, self.delta_min, self.delta_max)?
        };
        let r_stu = rng.random_range(lo..=hi);
        Ok(ScheduleState::from_student(r_stu, g, layer))
    }
}

/// Fixed-ratio schedule: constant `r`, zero gap, fixed layer. Used by the
/// no-progressive-ratio ablation and direct training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedSchedule {
    pub ratio: f64,
    pub layer: usize,
}

impl FixedSchedule {
    pub fn sample(&self) -> ScheduleState {
        ScheduleState::from_student(self.ratio, 0.0, self.layer)
    }
}

/// Scheduler selected by experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scheduler {
    Tcd(TcdSchedule),
    Lcd(LcdSchedule),
    Icd(IcdSchedule),
    Fixed(FixedSchedule),
}

impl Scheduler {
    pub fn validate(&self) -> Result<()> {
        match self {
            Scheduler::Tcd(s) => s.validate(),
            Scheduler::Lcd(s) => s.validate(),
            Scheduler::Icd(s) => s.validate(),
            Scheduler::Fixed(s) => {
                if !(0.0..=1.0).contains(&s.ratio) {
                    return Err(Error::Schedule(format!("fixed ratio {} outside [0,1]", s.ratio)));
                }
                Ok(())
            }
        }
    }

    pub fn sample(&self, t: usize, rng: &mut StdRng) -> Result<ScheduleState> {
        match self {
            Scheduler::Tcd(s) => s.sample(t, rng),
            Scheduler::Lcd(s) => s.sample(t, rng),
            Scheduler::Icd(s) => s.sample(t, rng),
            Scheduler::Fixed(s) => Ok(s.sample()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheduler::Tcd(_) => "tcd",
            Scheduler::Lcd(_) => "lcd",
            Scheduler::Icd(_) => "icd",
            Scheduler::Fixed(_) => "fixed",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gap_endpoints_and_midpoint() {
        assert_eq!(gap(0, 100, 0.0, 0.3).unwrap(), 0.0);
        assert_eq!(gap(100, 100, 0.0, 0.3).unwrap(), 0.3);
        assert!((gap(50, 100, 0.0, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(gap(101, 100, 0.0, 0.3).is_err());
    }

    #[test]
    fn tcd_window_endpoints() {
        let s = TcdSchedule { total_steps: 1000, ..Default::default() };
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..500 {
            let st = s.sample(0, &mut rng).unwrap();
            assert!(st.r_stu >= 0.0 && st.r_stu <= 0.05, "start draw {}", st.r_stu);
            let st = s.sample(1000, &mut rng).unwrap();
            assert!(st.r_stu >= 0.50 && st.r_stu <= 0.90, "end draw {}", st.r_stu);
        }
    }

    #[test]
    fn tcd_teacher_never_exceeds_student() {
        let s = TcdSchedule { total_steps: 200, ..Default::default() };
        let mut rng = StdRng::seed_from_u64(4);
        for t in 0..=200 {
            let st = s.sample(t, &mut rng).unwrap();
            assert!(st.r_tea <= st.r_stu);
            assert!(st.r_tea >= 0.0);
            assert_eq!(st.r_tea, (st.r_stu - st.gap).max(0.0));
        }
    }

    #[test]
    fn lcd_layer_formula_and_endpoints() {
        let s = LcdSchedule { total_steps: 2, n_layers: 12, l_min: 2, ..LcdSchedule::defaults(2, 12) };
        assert_eq!(s.layer(0).unwrap(), 12);
        assert_eq!(s.layer(2).unwrap(), 2);
        // beta = 0.5: Round(12 - 5) = 7
        assert_eq!(s.layer(1).unwrap(), 7);
    }

    #[test]
    fn lcd_draws_within_window_and_zero_gap_start() {
        let s = LcdSchedule::defaults(100, 8);
        let mut rng = StdRng::seed_from_u64(2);
        for t in 0..=100 {
            let st = s.sample(t, &mut rng).unwrap();
            assert!(st.r_stu >= 0.2 && st.r_stu <= 0.9);
            assert!(st.r_tea <= st.r_stu);
        }
        let st0 = s.sample(0, &mut rng).unwrap();
        assert_eq!(st0.r_tea, st0.r_stu, "zero gap at t = 0");
    }

    #[test]
    fn icd_resets_ratio_at_block_starts() {
        let s = IcdSchedule::defaults(700, 8); // 7 blocks of 100
        let mut rng = StdRng::seed_from_u64(8);
        for b in 0..s.blocks() {
            let t = b * 100;
            for _ in 0..200 {
                let st = s.sample(t, &mut rng).unwrap();
                assert!(st.r_stu <= s.eps + 1e-12, "block {b} start draw {}", st.r_stu);
            }
        }
        assert_eq!(s.sample(0, &mut rng).unwrap().layer, 8);
        assert_eq!(s.sample(700, &mut rng).unwrap().layer, 2);
    }

    #[test]
    fn icd_single_block_matches_tcd() {
        let icd = IcdSchedule { n_layers: 2, l_min: 2, ..IcdSchedule::defaults(50, 2) };
        let tcd = TcdSchedule { total_steps: 50, fixed_layer: 2, ..Default::default() };
        for t in 0..=50 {
            let a = icd.sample(t, &mut StdRng::seed_from_u64(t as u64)).unwrap();
            let b = tcd.sample(t, &mut StdRng::seed_from_u64(t as u64)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn icd_block_layers_non_increasing() {
        let s = IcdSchedule::defaults(97, 6); // uneven block lengths
        let mut rng = StdRng::seed_from_u64(5);
        let mut prev = usize::MAX;
        for t in 0..=97 {
            let st = s.sample(t, &mut rng).unwrap();
            assert!(st.layer <= prev);
            assert!(st.layer >= 2 && st.layer <= 6);
            prev = st.layer;
        }
    }

    #[test]
    fn fixed_schedule_constant() {
        let s = FixedSchedule { ratio: 8.0 / 9.0, layer: 2 };
        let st = s.sample();
        assert_eq!(st.r_stu, 8.0 / 9.0);
        assert_eq!(st.r_tea, 8.0 / 9.0);
        assert_eq!(st.gap, 0.0);
        assert_eq!(st.layer, 2);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let bad = TcdSchedule { eps: 0.95, r_max_final: 0.9, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LcdSchedule { l_min: 9, ..LcdSchedule::defaults(10, 8) };
        assert!(bad.validate().is_err());
        assert!(Scheduler::Fixed(FixedSchedule { ratio: 1.5, layer: 2 }).validate().is_err());
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1024))]

        /// TCD windows are monotone and well ordered on a dense step grid.
        #[test]
        fn tcd_monotone_window(total in 1usize..2000, t1 in 0usize..2000, t2 in 0usize..2000) {
            let s = TcdSchedule { total_steps: total, ..Default::default() };
            let (a, b) = (t1.min(total), t2.min(total));
            let (lo, hi) = (a.min(b), a.max(b));
            let (min_lo, max_lo) = s.window(lo);
            let (min_hi, max_hi) = s.window(hi);
            prop_assert!(min_lo <= max_lo + 1e-12);
            prop_assert!(min_hi <= max_hi + 1e-12);
            prop_assert!(max_lo <= max_hi + 1e-12);
            prop_assert!(min_lo <= min_hi + 1e-12);
            let g_lo = gap(lo, total, 0.0, 0.3).unwrap();
            let g_hi = gap(hi, total, 0.0, 0.3).unwrap();
            prop_assert!(g_lo <= g_hi + 1e-12);
        }

        /// LCD layer is non-increasing and stays in range.
        #[test]
        fn lcd_layer_non_increasing(total in 1usize..1500, layers in 2usize..32, t1 in 0usize..1500, t2 in 0usize..1500) {
            let s = LcdSchedule::defaults(total, layers);
            let (a, b) = (t1.min(total), t2.min(total));
            let (lo, hi) = (a.min(b), a.max(b));
            let l_lo = s.layer(lo).unwrap();
            let l_hi = s.layer(hi).unwrap();
            prop_assert!(l_hi <= l_lo);
            prop_assert!((s.l_min..=s.n_layers).contains(&l_lo));
            prop_assert!((s.l_min..=s.n_layers).contains(&l_hi));
        }

        /// Every sample from every scheduler satisfies the state invariant
        /// r_tea = max(0, r_stu - gap).
        #[test]
        fn state_invariant_all_schedulers(total in 4usize..400, layers in 2usize..16, t in 0usize..400, seed in 0u64..10_000) {
            let t = t.min(total);
            let mut rng = StdRng::seed_from_u64(seed);
            let scheds = [
                Scheduler::Tcd(TcdSchedule { total_steps: total, ..Default::default() }),
                Scheduler::Lcd(LcdSchedule::defaults(total, layers)),
                Scheduler::Icd(IcdSchedule::defaults(total.max(layers), layers)),
                Scheduler::Fixed(FixedSchedule { ratio: 8.0 / 9.0, layer: 2 }),
            ];
            for s in scheds {
                let st = s.sample(t.min(total.max(layers)), &mut rng).unwrap();
                prop_assert_eq!(st.r_tea, (st.r_stu - st.gap).max(0.0));
                prop_assert!(st.r_stu >= 0.0 && st.r_stu <= 1.0);
            }
        }
    }
}
