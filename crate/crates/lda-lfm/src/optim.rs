//! Trainable parameters, the Adam optimizer, and a finite-difference
//! gradient oracle for checking analytic gradients on small instances.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Ratings;
use crate::rng::rng_from_seed;

/// Scale of the normal initialization for biases, factors, and topic
/// natural parameters.
pub const SIGMA_INIT: f64 = 0.1;

/// Initial value of the pickiness scalar; trained afterwards.
pub const KAPPA_INIT: f64 = 1.0;

/// Every trainable scalar, vector, and matrix of the models.
///
/// `p` and `q` have `k + k_star` columns; only the first `k` item-factor
/// columns feed the topic distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub alpha: f64,
    pub kappa: f64,
    pub b_user: Array1<f64>,
    pub b_item: Array1<f64>,
    pub p: Array2<f64>,
    pub q: Array2<f64>,
    pub psi: Array2<f64>,
    k: usize,
    k_star: usize,
}

impl ParamSet {
    /// All-zero parameters with the given extents.
    pub fn zeros(n_users: usize, n_items: usize, k: usize, k_star: usize, v: usize) -> Self {
        assert!(k >= 1, "need at least one factor/topic");
        assert!(v >= 1, "need a non-empty vocabulary width");
        ParamSet {
            alpha: 0.0,
            kappa: 0.0,
            b_user: Array1::zeros(n_users),
            b_item: Array1::zeros(n_items),
            p: Array2::zeros((n_users, k + k_star)),
            q: Array2::zeros((n_items, k + k_star)),
            psi: Array2::zeros((k, v)),
            k,
            k_star,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet::zeros(self.n_users(), self.n_items(), self.k, self.k_star, self.v())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn k_star(&self) -> usize {
        self.k_star
    }

    /// Total factor columns, `k + k_star`.
    pub fn n_factors(&self) -> usize {
        self.k + self.k_star
    }

    pub fn v(&self) -> usize {
        self.psi.ncols()
    }

    pub fn n_users(&self) -> usize {
        self.b_user.len()
    }

    pub fn n_items(&self) -> usize {
        self.b_item.len()
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.k == other.k
            && self.k_star == other.k_star
            && self.b_user.len() == other.b_user.len()
            && self.b_item.len() == other.b_item.len()
            && self.p.dim() == other.p.dim()
            && self.q.dim() == other.q.dim()
            && self.psi.dim() == other.psi.dim()
    }

    /// First non-finite block, if any.
    pub fn non_finite_block(&self) -> Option<&'static str> {
        if !self.alpha.is_finite() {
            return Some("alpha");
        }
        if !self.kappa.is_finite() {
            return Some("kappa");
        }
        for (name, arr) in [("b_user", &self.b_user)] {
            if arr.iter().any(|x| !x.is_finite()) {
                return Some(name);
            }
        }
        if self.b_item.iter().any(|x| !x.is_finite()) {
            return Some("b_item");
        }
        for (name, arr) in [("p", &self.p), ("q", &self.q), ("psi", &self.psi)] {
            if arr.iter().any(|x| !x.is_finite()) {
                return Some(name);
            }
        }
        None
    }

    /// Flatten every coordinate into one vector, block by block in the
    /// fixed order alpha, kappa, b_user, b_item, p, q, psi.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.alpha);
        out.push(self.kappa);
        out.extend(self.b_user.iter());
        out.extend(self.b_item.iter());
        out.extend(self.p.iter());
        out.extend(self.q.iter());
        out.extend(self.psi.iter());
        out
    }

    /// Total coordinate count.
    pub fn len(&self) -> usize {
        2 + self.b_user.len()
            + self.b_item.len()
            + self.p.len()
            + self.q.len()
            + self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Overwrite every coordinate from a flat vector laid out as in
    /// [`ParamSet::flatten`].
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat vector length mismatch");
        let mut it = flat.iter().copied();
        self.alpha = it.next().unwrap();
        self.kappa = it.next().unwrap();
        for x in self.b_user.iter_mut() {
            *x = it.next().unwrap();
        }
        for x in self.b_item.iter_mut() {
            *x = it.next().unwrap();
        }
        for x in self.p.iter_mut() {
            *x = it.next().unwrap();
        }
        for x in self.q.iter_mut() {
            *x = it.next().unwrap();
        }
        for x in self.psi.iter_mut() {
            *x = it.next().unwrap();
        }
    }

    /// Block name owning a flat coordinate (for diagnostics).
    pub fn block_of(&self, idx: usize) -> &'static str {
        let mut rest = idx;
        for (name, len) in [
            ("alpha", 1),
            ("kappa", 1),
            ("b_user", self.b_user.len()),
            ("b_item", self.b_item.len()),
            ("p", self.p.len()),
            ("q", self.q.len()),
            ("psi", self.psi.len()),
        ] {
            if rest < len {
                return name;
            }
            rest -= len;
        }
        panic!("coordinate {idx} out of range");
    }
}

/// Initialize parameters for a training set: alpha is the mean train
/// rating; biases, factors and psi are Normal(0, 0.1) draws from the seed;
/// kappa starts at 1.
pub fn init_params(
    train: &Ratings,
    k: usize,
    k_star: usize,
    v: usize,
    seed: u64,
) -> Result<ParamSet> {
    if train.entries.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    if k < 1 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if v < 1 {
        return Err(Error::InvalidArgument("V must be >= 1".into()));
    }
    let mut params = ParamSet::zeros(train.n_users, train.n_items, k, k_star, v);
    params.alpha = train.mean_rating();
    params.kappa = KAPPA_INIT;
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, SIGMA_INIT).expect("valid sigma");
    // Draw order is part of the determinism contract:
    // b_user, b_item, p, q, psi, each row-major.
    for x in params.b_user.iter_mut() {
        *x = normal.sample(&mut rng);
    }
    for x in params.b_item.iter_mut() {
        *x = normal.sample(&mut rng);
    }
    for x in params.p.iter_mut() {
        *x = normal.sample(&mut rng);
    }
    for x in params.q.iter_mut() {
        *x = normal.sample(&mut rng);
    }
    for x in params.psi.iter_mut() {
        *x = normal.sample(&mut rng);
    }
    Ok(params)
}

/// Adam accumulator state; one moment pair per parameter coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: ParamSet,
    v: ParamSet,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state (zero moments) shaped like `template`.
    pub fn new(template: &ParamSet, lr: f64) -> Self {
        AdamState {
            m: template.zeros_like(),
            v: template.zeros_like(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

#[inline]
fn adam_scalar(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, c: &AdamCoeffs) {
    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
    let m_hat = *m * c.inv_bias1;
    let v_hat = *v * c.inv_bias2;
    *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
}

struct AdamCoeffs {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    inv_bias1: f64,
    inv_bias2: f64,
}

/// One Adam update over every parameter block, alpha and kappa included.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState) -> Result<()> {
    if !params.same_shape(grads) {
        return Err(Error::ShapeMismatch(
            "gradient shape differs from parameter shape".into(),
        ));
    }
    if let Some(block) = grads.non_finite_block() {
        return Err(Error::NonFinite { block });
    }
    state.t += 1;
    let c = AdamCoeffs {
        lr: state.lr,
        beta1: state.beta1,
        beta2: state.beta2,
        eps: state.eps,
        inv_bias1: 1.0 / (1.0 - state.beta1.powi(state.t as i32)),
        inv_bias2: 1.0 / (1.0 - state.beta2.powi(state.t as i32)),
    };
    adam_scalar(
        &mut params.alpha,
        grads.alpha,
        &mut state.m.alpha,
        &mut state.v.alpha,
        &c,
    );
    adam_scalar(
        &mut params.kappa,
        grads.kappa,
        &mut state.m.kappa,
        &mut state.v.kappa,
        &c,
    );
    for ((p, g), (m, v)) in params
        .b_user
        .iter_mut()
        .zip(grads.b_user.iter())
        .zip(state.m.b_user.iter_mut().zip(state.v.b_user.iter_mut()))
    {
        adam_scalar(p, *g, m, v, &c);
    }
    for ((p, g), (m, v)) in params
        .b_item
        .iter_mut()
        .zip(grads.b_item.iter())
        .zip(state.m.b_item.iter_mut().zip(state.v.b_item.iter_mut()))
    {
        adam_scalar(p, *g, m, v, &c);
    }
    for ((p, g), (m, v)) in params
        .p
        .iter_mut()
        .zip(grads.p.iter())
        .zip(state.m.p.iter_mut().zip(state.v.p.iter_mut()))
    {
        adam_scalar(p, *g, m, v, &c);
    }
    for ((p, g), (m, v)) in params
        .q
        .iter_mut()
        .zip(grads.q.iter())
        .zip(state.m.q.iter_mut().zip(state.v.q.iter_mut()))
    {
        adam_scalar(p, *g, m, v, &c);
    }
    for ((p, g), (m, v)) in params
        .psi
        .iter_mut()
        .zip(grads.psi.iter())
        .zip(state.m.psi.iter_mut().zip(state.v.psi.iter_mut()))
    {
        adam_scalar(p, *g, m, v, &c);
    }
    if let Some(block) = params.non_finite_block() {
        return Err(Error::NonFinite { block });
    }
    Ok(())
}

/// Central-difference gradient of a scalar objective, coordinate by
/// coordinate. Intended for small instances only (it is O(len) objective
/// evaluations in each direction).
pub fn finite_diff_gradient<F>(objective: F, params: &ParamSet, h: f64) -> Result<ParamSet>
where
    F: Fn(&ParamSet) -> f64,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("step h must be positive".into()));
    }
    let base = objective(params);
    if !base.is_finite() {
        return Err(Error::NonFinite { block: "objective" });
    }
    let mut flat = params.flatten();
    let mut scratch = params.clone();
    let mut grad_flat = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + h;
        scratch.assign_from_flat(&flat);
        let plus = objective(&scratch);
        flat[i] = orig - h;
        scratch.assign_from_flat(&flat);
        let minus = objective(&scratch);
        flat[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                block: params.block_of(i),
            });
        }
        grad_flat[i] = (plus - minus) / (2.0 * h);
    }
    scratch.assign_from_flat(&flat);
    let mut grad = params.zeros_like();
    grad.assign_from_flat(&grad_flat);
    Ok(grad)
}

/// Saved model: shape header, seed, parameters, and (for the joint model)
/// the last topic assignments.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: String,
    pub k: usize,
    pub k_star: usize,
    pub v: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub lambda: f64,
    pub mu: f64,
    pub seed: u64,
    pub params: ParamSet,
    pub topic_state: Option<Vec<Vec<usize>>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format {} (supported: {})",
                ck.format_version, CHECKPOINT_VERSION
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::DenseRating;

    fn ratings(rs: &[f64]) -> Ratings {
        Ratings {
            n_users: rs.len(),
            n_items: 1,
            entries: rs
                .iter()
                .enumerate()
                .map(|(u, &rating)| DenseRating { user: u, item: 0, rating })
                .collect(),
        }
    }

    #[test]
    fn init_alpha_is_train_mean() {
        let p = init_params(&ratings(&[4.0, 4.0, 4.0]), 2, 0, 3, 1).unwrap();
        assert_eq!(p.alpha, 4.0);
        let p = init_params(&ratings(&[1.0, 5.0]), 2, 0, 3, 1).unwrap();
        assert_eq!(p.alpha, 3.0);
        assert_eq!(p.kappa, 1.0);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = init_params(&ratings(&[2.0, 3.0]), 3, 2, 7, 42).unwrap();
        let b = init_params(&ratings(&[2.0, 3.0]), 3, 2, 7, 42).unwrap();
        assert_eq!(a, b);
        let c = init_params(&ratings(&[2.0, 3.0]), 3, 2, 7, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_empty_train() {
        let empty = Ratings { n_users: 0, n_items: 0, entries: vec![] };
        assert!(init_params(&empty, 2, 0, 3, 1).is_err());
    }

    fn scalar_params(theta: f64) -> ParamSet {
        let mut p = ParamSet::zeros(1, 1, 1, 0, 1);
        p.alpha = theta;
        p
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        // theta=0, g=1, lr=0.01: m_hat=1, v_hat=1, step = -0.01/(1+1e-8).
        let mut p = scalar_params(0.0);
        let mut g = p.zeros_like();
        g.alpha = 1.0;
        let mut st = AdamState::new(&p, 0.01);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!((p.alpha - (-0.009_999_999_9)).abs() < 1e-9, "got {}", p.alpha);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut p = init_params(&ratings(&[3.0, 4.0]), 2, 1, 3, 5).unwrap();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p, 0.01);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_is_pure_in_its_inputs() {
        let p0 = init_params(&ratings(&[3.0, 4.0]), 2, 0, 2, 7).unwrap();
        let mut g = p0.zeros_like();
        g.alpha = 0.3;
        g.b_user[0] = -0.2;
        let run = || {
            let mut p = p0.clone();
            let mut st = AdamState::new(&p, 0.01);
            adam_step(&mut p, &g, &mut st).unwrap();
            adam_step(&mut p, &g, &mut st).unwrap();
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_gradients_naming_the_block() {
        let mut p = scalar_params(0.0);
        let mut g = p.zeros_like();
        g.kappa = f64::NAN;
        let mut st = AdamState::new(&p, 0.01);
        match adam_step(&mut p, &g, &mut st) {
            Err(Error::NonFinite { block }) => assert_eq!(block, "kappa"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn adam_descends_a_convex_quadratic() {
        // f(theta) = theta^2, grad = 2 theta, from theta=1 at lr=0.01.
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p, 0.01);
        for _ in 0..500 {
            let mut g = p.zeros_like();
            g.alpha = 2.0 * p.alpha;
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!(p.alpha.abs() < 0.1, "|theta| = {}", p.alpha.abs());
    }

    #[test]
    fn finite_diff_on_known_derivatives() {
        // f = alpha^2 at alpha=3 -> 6.
        let p = scalar_params(3.0);
        let g = finite_diff_gradient(|p| p.alpha * p.alpha, &p, 1e-5).unwrap();
        assert!((g.alpha - 6.0).abs() < 1e-6);

        // constant f -> zero everywhere.
        let g = finite_diff_gradient(|_| 7.5, &p, 1e-5).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));

        // f = b_user[0] * b_user[1] at (2, 5) -> (5, 2).
        let mut p = ParamSet::zeros(2, 1, 1, 0, 1);
        p.b_user[0] = 2.0;
        p.b_user[1] = 5.0;
        let g = finite_diff_gradient(|p| p.b_user[0] * p.b_user[1], &p, 1e-5).unwrap();
        assert!((g.b_user[0] - 5.0).abs() < 1e-6);
        assert!((g.b_user[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_requires_positive_h() {
        let p = scalar_params(0.0);
        assert!(finite_diff_gradient(|p| p.alpha, &p, 0.0).is_err());
    }

    #[test]
    fn shapes_are_preserved_through_updates() {
        let p0 = init_params(&ratings(&[3.0, 4.0, 2.0]), 3, 2, 6, 9).unwrap();
        let mut p = p0.clone();
        let mut g = p.zeros_like();
        g.p[[0, 0]] = 1.0;
        let mut st = AdamState::new(&p, 0.01);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!(p.same_shape(&p0));
    }

    #[test]
    fn flatten_roundtrip() {
        let p = init_params(&ratings(&[3.0, 4.0]), 2, 1, 4, 3).unwrap();
        let mut q = p.zeros_like();
        q.assign_from_flat(&p.flatten());
        assert_eq!(p, q);
        assert_eq!(p.block_of(0), "alpha");
        assert_eq!(p.block_of(1), "kappa");
        assert_eq!(p.block_of(p.len() - 1), "psi");
    }

    #[test]
    fn checkpoint_roundtrips_exactly() {
        let params = init_params(&ratings(&[3.25, 4.5]), 2, 1, 5, 77).unwrap();
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: "lda_lfm".into(),
            k: params.k(),
            k_star: params.k_star(),
            v: params.v(),
            n_users: params.n_users(),
            n_items: params.n_items(),
            lambda: 0.01,
            mu: 1.0,
            seed: 77,
            params: params.clone(),
            topic_state: Some(vec![vec![0, 1, 0], vec![]]),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.topic_state, ck.topic_state);
        assert_eq!(back.k, 2);
    }
}
