//! Parameter updates: plain gradient descent and Adam, with a step-decay
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

fn check_len(op: &'static str, params: usize, grads: usize) -> Result<()> {
    if params != grads {
        return Err(Error::shape(op, &[params], &[grads]));
    }
    Ok(())
}

/// `p <- p - lr * g`.
pub fn gd_step<T: Scalar>(params: &mut [T], grads: &[T], lr: f64) -> Result<()> {
    check_len("gd_step", params.len(), grads.len())?;
    let lr = T::from_f64(lr);
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = *p - lr * g;
    }
    Ok(())
}

/// Rescales all gradients together so that their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::from_f64(max_norm / norm);
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v = *v * scale;
        }
    }
    norm
}

/// Adam moments for a fixed list of parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of steps taken.
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for arrays of the given lengths.
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<T>> = sizes.into_iter().map(|n| vec![T::zero(); n]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected Adam step over every `(param, grad)` pair, in the
    /// order the state was created with.
    pub fn step<'a, I>(&mut self, lr: f64, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut [T], &'a [T])>,
    {
        let pairs: Vec<_> = pairs.into_iter().collect();
        if pairs.len() != self.m.len() {
            return Err(Error::shape("adam_step", &[self.m.len()], &[pairs.len()]));
        }
        for (k, (p, g)) in pairs.iter().enumerate() {
            check_len("adam_step", self.m[k].len(), p.len())?;
            check_len("adam_step", p.len(), g.len())?;
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let corr1 = T::from_f64(1.0 - self.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(self.epsilon));
        for (k, (p, g)) in pairs.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: the initial rate times the product of
/// the multipliers of all milestones already reached.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    /// `(iteration, multiplier)`, iterations strictly increasing.
    pub milestones: Vec<(u64, f64)>,
}

impl LrSchedule {
    pub fn new(initial: f64, milestones: Vec<(u64, f64)>) -> Result<Self> {
        let s = LrSchedule { initial, milestones };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(initial: f64) -> Result<Self> {
        Self::new(initial, Vec::new())
    }

    /// Multiplies by `factor` every `period` iterations below `horizon`.
    pub fn periodic(initial: f64, period: u64, factor: f64, horizon: u64) -> Result<Self> {
        if period == 0 {
            return Err(Error::InvalidArgument("schedule period must be positive".into()));
        }
        let milestones = (1..)
            .map(|k| k * period)
            .take_while(|&it| it < horizon)
            .map(|it| (it, factor))
            .collect();
        Self::new(initial, milestones)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.initial
            )));
        }
        if let Some(&(_, m)) = self.milestones.iter().find(|(_, m)| !(*m > 0.0 && *m <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "schedule multipliers must lie in (0, 1], got {m}"
            )));
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument(
                "schedule milestones must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.milestones
            .iter()
            .take_while(|(it, _)| *it <= iteration)
            .fold(self.initial, |lr, (_, m)| lr * m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gd_plug_in_values() {
        let mut p = [1.0f64];
        gd_step(&mut p, &[2.0], 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);

        // loss p², gradient 2p
        let mut q = [1.0f64];
        let g = [2.0 * q[0]];
        gd_step(&mut q, &g, 0.1).unwrap();
        assert_eq!(q[0], 0.8);
        let g = [2.0 * q[0]];
        gd_step(&mut q, &g, 0.1).unwrap();
        assert!((q[0] - 0.64).abs() < 1e-15);

        let mut z = [0.3f32, -0.2];
        gd_step(&mut z, &[0.0, 0.0], 5.0).unwrap();
        assert_eq!(z, [0.3, -0.2]);
        assert!(gd_step(&mut z, &[0.0], 1.0).is_err());
    }

    #[test]
    fn adam_first_step_is_the_learning_rate() {
        let mut state = AdamState::<f64>::new([1]);
        let mut p = [0.5];
        state.step(0.001, [(&mut p[..], &[1.0][..])]).unwrap();
        assert!((p[0] - (0.5 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_rejects_mismatched_layouts() {
        let mut state = AdamState::<f32>::new([2, 3]);
        let mut p = [0.0; 2];
        assert!(state.step(0.1, [(&mut p[..], &[1.0, 1.0][..])]).is_err());
        let mut a = [0.0; 2];
        let mut b = [0.0; 4];
        assert!(state
            .step(0.1, [(&mut a[..], &[0.0; 2][..]), (&mut b[..], &[0.0; 4][..])])
            .is_err());
        assert_eq!(state.t, 0);
    }

    #[test]
    fn schedule_plug_in_values() {
        let s = LrSchedule::new(0.00004, vec![(20_000, 0.5), (40_000, 0.5)]).unwrap();
        assert_eq!(s.lr_at(0), 0.00004);
        assert_eq!(s.lr_at(19_999), 0.00004);
        assert_eq!(s.lr_at(25_000), 0.00002);
        assert_eq!(s.lr_at(60_000), 0.00001);
        let p = LrSchedule::periodic(0.00004, 20_000, 0.5, 60_001).unwrap();
        assert_eq!(p.milestones, vec![(20_000, 0.5), (40_000, 0.5), (60_000, 0.5)]);
        assert_eq!(p.lr_at(60_000), 0.000005);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::constant(0.0).is_err());
        assert!(LrSchedule::new(0.1, vec![(10, 1.5)]).is_err());
        assert!(LrSchedule::new(0.1, vec![(10, 0.5), (10, 0.5)]).is_err());
        assert!(LrSchedule::periodic(0.1, 0, 0.5, 10).is_err());
    }

    #[test]
    fn clipping_scales_to_the_norm_limit() {
        let mut a = [3.0f64];
        let mut b = [4.0f64];
        let norm = clip_global_norm(&mut [&mut a[..], &mut b[..]], 1.0);
        assert_eq!(norm, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
        let mut c = [0.1f64];
        clip_global_norm(&mut [&mut c[..]], 1.0);
        assert_eq!(c[0], 0.1);
    }

    proptest! {
        #[test]
        fn adam_with_zero_gradients_is_the_identity(p0 in prop::collection::vec(-1.0f64..1.0, 1..8), steps in 1usize..20) {
            let mut state = AdamState::<f64>::new([p0.len()]);
            let mut p = p0.clone();
            let g = vec![0.0; p0.len()];
            for _ in 0..steps {
                state.step(0.01, [(&mut p[..], &g[..])]).unwrap();
            }
            prop_assert_eq!(&p, &p0);
            prop_assert!(state.v[0].iter().all(|&v| v == 0.0));
        }

        #[test]
        fn adam_first_step_opposes_the_gradient(g in prop::collection::vec(-10.0f64..10.0, 1..16), lr in 1e-5f64..1e-1) {
            let mut state = AdamState::<f64>::new([g.len()]);
            let mut p = vec![0.0; g.len()];
            state.step(lr, [(&mut p[..], &g[..])]).unwrap();
            for (pi, gi) in p.iter().zip(&g) {
                if *gi != 0.0 {
                    prop_assert!(pi.signum() == -gi.signum());
                    // first step: |m̂ / sqrt(v̂)| = |g| / (|g| + eps) <= 1
                    prop_assert!(pi.abs() <= lr * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn adam_steps_respect_the_moment_bound(
            grads in prop::collection::vec(-5.0f64..5.0, 1..200),
            lr in 1e-5f64..1e-2,
        ) {
            // Cauchy-Schwarz on the two exponential averages gives
            // |m̂ / sqrt(v̂)| <= (1 - β1) / sqrt((1 - β2) (1 - β1² / β2)) for any sequence.
            let mut state = AdamState::<f64>::new([1]);
            let (b1, b2) = (state.beta1, state.beta2);
            let bound = lr * (1.0 - b1) / ((1.0 - b2) * (1.0 - b1 * b1 / b2)).sqrt() * (1.0 + 1e-9);
            let mut p = [0.0];
            for g in grads {
                let before = p[0];
                state.step(lr, [(&mut p[..], &[g][..])]).unwrap();
                prop_assert!((p[0] - before).abs() <= bound);
                prop_assert!(state.v[0][0] >= 0.0);
            }
        }

        #[test]
        fn gd_is_linear_in_the_gradient(
            p in prop::collection::vec(-1.0f64..1.0, 4),
            g1 in prop::collection::vec(-1.0f64..1.0, 4),
            g2 in prop::collection::vec(-1.0f64..1.0, 4),
            lr in 1e-4f64..1.0,
        ) {
            let mut joint = p.clone();
            let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
            gd_step(&mut joint, &sum, lr).unwrap();
            let mut split = p.clone();
            gd_step(&mut split, &g1, lr).unwrap();
            gd_step(&mut split, &g2, lr).unwrap();
            for (a, b) in joint.iter().zip(&split) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn schedules_never_increase(
            mut its in prop::collection::btree_set(1u64..100_000, 0..6),
            mults in prop::collection::vec(0.01f64..=1.0, 6),
            a in 0u64..120_000,
            b in 0u64..120_000,
        ) {
            let milestones: Vec<_> = std::mem::take(&mut its).into_iter().zip(mults).collect();
            let s = LrSchedule::new(0.001, milestones).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.lr_at(hi) <= s.lr_at(lo));
        }
    }
}
