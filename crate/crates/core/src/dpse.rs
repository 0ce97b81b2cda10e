//! Dual-path speech encoder.
//!
//! Frontend features pass through a trainable adapter and a multi-scale
//! dilated convolution block to give the shared sequence `h_s`. The head-pose
//! path pools `h_s` at a coarse and a fine resolution, refines each with
//! cross-attention back onto `h_s` and fuses them. The expression path
//! modulates `h_s` with prosody (FiLM), pools it with a short window and
//! refines it with cross-attention onto the modulated sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{encode_frontend, FrontendConfig};
use crate::kernels::{
    depthwise_dilated_conv1d, dropout, film, glu, group_norm, windowed_mean_pool, Attention,
    FeedForward, Linear, Masking, ParamId, ParamStore, Tape, Var,
};
use crate::motion_io::AudioClip;
use crate::prosody::{extract_prosody, ProsodyConfig};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpseConfig {
    /// Width of the frontend features fed to the adapter.
    pub input_dim: usize,
    pub dim: usize,
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    pub groups: usize,
    pub dropout: f64,
    pub window_coarse: f64,
    pub window_fine: f64,
    pub window_expr: f64,
    pub heads: usize,
    /// Frames per second of the frontend features.
    pub feature_rate: f64,
    pub seed: u64,
}

impl Default for DpseConfig {
    fn default() -> Self {
        DpseConfig {
            input_dim: 512,
            dim: 512,
            dilations: vec![1, 2, 4],
            kernel_size: 5,
            groups: 8,
            dropout: 0.1,
            window_coarse: 1.0,
            window_fine: 0.25,
            window_expr: 0.1,
            heads: 8,
            feature_rate: 50.0,
            seed: 17,
        }
    }
}

impl DpseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.input_dim == 0 {
            return Err(Error::config("encoder widths must be >= 1"));
        }
        if self.groups == 0 || !self.dim.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} groups",
                self.dim, self.groups
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::config("need at least one dilation, all >= 1"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        let windows = [self.window_coarse, self.window_fine, self.window_expr, self.feature_rate];
        if windows.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::config("pooling windows and feature rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MsdcBranch {
    pub kernel: ParamId,
    pub dilation: usize,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub widen: Linear,
    pub pointwise: Linear,
}

#[derive(Clone, Debug)]
pub struct Msdc {
    pub branches: Vec<MsdcBranch>,
    pub project: Linear,
    pub groups: usize,
}

impl Msdc {
    fn new(store: &mut ParamStore, cfg: &DpseConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let bound = 1.0 / (cfg.kernel_size as f64).sqrt();
        let branches = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &dilation)| MsdcBranch {
                kernel: store.add(
                    format!("msdc.{i}.kernel"),
                    Matrix::random_uniform(cfg.kernel_size, d, bound, rng),
                ),
                dilation,
                norm_gain: store.add(format!("msdc.{i}.norm.gain"), Matrix::filled(1, d, 1.0)),
                norm_bias: store.add(format!("msdc.{i}.norm.bias"), Matrix::zeros(1, d)),
                widen: Linear::new(store, &format!("msdc.{i}.widen"), d, 2 * d, rng),
                pointwise: Linear::new(store, &format!("msdc.{i}.pointwise"), d, d, rng),
            })
            .collect::<Vec<_>>();
        let project = Linear::new(store, "msdc.project", branches.len() * d, d, rng);
        Msdc {
            branches,
            project,
            groups: cfg.groups,
        }
    }

    /// `x + dropout(project([branch_1(x), ..., branch_L(x)]))`; dropout runs
    /// only when `train_rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        dropout_p: f64,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let k = tape.param(b.kernel);
            let h = depthwise_dilated_conv1d(tape, x, k, b.dilation)?;
            let (g, bias) = (tape.param(b.norm_gain), tape.param(b.norm_bias));
            let h = group_norm(tape, h, self.groups, g, bias, 1e-5)?;
            let h = b.widen.forward(tape, h)?;
            let h = glu(tape, h)?;
            outs.push(b.pointwise.forward(tape, h)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let mut y = self.project.forward(tape, cat)?;
        if let Some(rng) = train_rng {
            y = dropout(tape, y, dropout_p, rng);
        }
        Ok(tape.add(x, y))
    }
}

/// Token projection, cross-attention onto a key/value sequence and FFN.
#[derive(Clone, Debug)]
pub struct Refiner {
    pub input: Linear,
    pub attention: Attention,
    pub ffn: FeedForward,
}

impl Refiner {
    fn new(store: &mut ParamStore, name: &str, cfg: &DpseConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Refiner {
            input: Linear::new(store, &format!("{name}.input"), cfg.dim, cfg.dim, rng),
            attention: Attention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.dim, rng),
        })
    }

    /// `c = input(pooled)`, `r = c + MHCA(c, kv)`, output `FFN(r)` with residual.
    pub fn forward(&self, tape: &mut Tape, pooled: Var, kv: Var) -> Result<Var> {
        let c = self.input.forward(tape, pooled)?;
        let a = self.attention.forward(tape, c, kv, Masking::None)?;
        let r = tape.add(c, a);
        self.ffn.forward(tape, r)
    }

    pub fn zero_outputs(&self, store: &mut ParamStore) {
        self.attention.zero_output(store);
        self.ffn.zero_output(store);
    }
}

#[derive(Clone, Debug)]
pub struct HeadPoseBranch {
    pub coarse: Refiner,
    pub fine: Refiner,
    pub fuse: Linear,
}

#[derive(Clone, Debug)]
pub struct ExpressionBranch {
    pub gamma: Linear,
    pub beta: Linear,
    pub refiner: Refiner,
}

/// Number of coarse and fine head-pose tokens for `t` output frames.
pub fn head_token_counts(t: usize) -> (usize, usize) {
    (t.div_ceil(4), t.div_ceil(2))
}

#[derive(Clone, Debug)]
pub struct Dpse {
    pub config: DpseConfig,
    pub store: ParamStore,
    pub adapter: Linear,
    pub msdc: Msdc,
    pub head: HeadPoseBranch,
    pub expression: ExpressionBranch,
}

/// Prosody columns fed to the FiLM generators.
pub const PROSODY_DIM: usize = 2;

impl Dpse {
    pub fn new(config: DpseConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let adapter = Linear::new(&mut store, "adapter", config.input_dim, d, &mut rng);
        let msdc = Msdc::new(&mut store, &config, &mut rng);
        let head = HeadPoseBranch {
            coarse: Refiner::new(&mut store, "head.coarse", &config, &mut rng)?,
            fine: Refiner::new(&mut store, "head.fine", &config, &mut rng)?,
            fuse: Linear::new(&mut store, "head.fuse", 2 * d, d, &mut rng),
        };
        let gamma = Linear::new(&mut store, "expr.film_gamma", PROSODY_DIM, d, &mut rng);
        let beta = Linear::new(&mut store, "expr.film_beta", PROSODY_DIM, d, &mut rng);
        store.value_mut(gamma.bias.unwrap()).fill(1.0);
        store.value_mut(beta.bias.unwrap()).fill(0.0);
        let expression = ExpressionBranch {
            gamma,
            beta,
            refiner: Refiner::new(&mut store, "expr", &config, &mut rng)?,
        };
        Ok(Dpse {
            config,
            store,
            adapter,
            msdc,
            head,
            expression,
        })
    }

    /// Adapter followed by the MSDC block: `h_s`, `N' x D`.
    pub fn shared(&self, tape: &mut Tape, features: Var, train_rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let h = self.adapter.forward(tape, features)?;
        self.msdc.forward(tape, h, self.config.dropout, train_rng)
    }

    /// `f_h`, `T x D`.
    pub fn head_pose_branch(&self, tape: &mut Tape, h_s: Var, t: usize) -> Result<Var> {
        if t < 1 {
            return Err(Error::config("target length must be >= 1"));
        }
        let cfg = &self.config;
        let (n_coarse, n_fine) = head_token_counts(t);
        let mut resampled = Vec::with_capacity(2);
        for (refiner, window, n) in [
            (&self.head.coarse, cfg.window_coarse, n_coarse),
            (&self.head.fine, cfg.window_fine, n_fine),
        ] {
            let pooled = windowed_mean_pool(tape, h_s, window, cfg.feature_rate, n)?;
            let tokens = refiner.forward(tape, pooled, h_s)?;
            // A one-token window maps each output frame to its nearest token.
            resampled.push(windowed_mean_pool(tape, tokens, 1.0, 1.0, t)?);
        }
        let cat = tape.concat_cols(&resampled);
        self.head.fuse.forward(tape, cat)
    }

    /// `f_e`, `T x D`. With `prosody = None` the FiLM step is skipped.
    pub fn expression_branch(&self, tape: &mut Tape, h_s: Var, prosody: Option<Var>, t: usize) -> Result<Var> {
        if t < 1 {
            return Err(Error::config("target length must be >= 1"));
        }
        let modulated = match prosody {
            None => h_s,
            Some(p) => {
                let (pn, hn) = (tape.shape(p), tape.shape(h_s));
                if pn.0 != hn.0 || pn.1 != PROSODY_DIM {
                    return Err(Error::dim(format!(
                        "prosody is {}x{} but speech features have {} frames",
                        pn.0, pn.1, hn.0
                    )));
                }
                let gamma = self.expression.gamma.forward(tape, p)?;
                let beta = self.expression.beta.forward(tape, p)?;
                film(tape, h_s, gamma, beta)?
            }
        };
        let pooled = windowed_mean_pool(tape, modulated, self.config.window_expr, self.config.feature_rate, t)?;
        self.expression.refiner.forward(tape, pooled, modulated)
    }

    /// Both branches from frontend features `N' x input_dim` and normalized
    /// prosody `N' x 2`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: Var,
        prosody: Var,
        t: usize,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let h_s = self.shared(tape, features, train_rng)?;
        let f_h = self.head_pose_branch(tape, h_s, t)?;
        let f_e = self.expression_branch(tape, h_s, Some(prosody), t)?;
        Ok((f_h, f_e))
    }

    /// Eval-mode forward on plain matrices.
    pub fn encode(&self, features: &Matrix, prosody: &Matrix, t: usize) -> Result<(Matrix, Matrix)> {
        if features.cols() != self.config.input_dim {
            return Err(Error::dim(format!(
                "encoder expects {}-wide features, got {}",
                self.config.input_dim,
                features.cols()
            )));
        }
        let mut tape = Tape::new(&self.store);
        let f = tape.constant(features.clone());
        let p = tape.constant(prosody.clone());
        let (h, e) = self.forward(&mut tape, f, p, t, None)?;
        Ok((tape.value(h).clone(), tape.value(e).clone()))
    }
}

/// Frontend features and normalized prosody for a clip, on the same frame grid.
pub fn speech_inputs(a: &AudioClip, frontend: &FrontendConfig, prosody: &ProsodyConfig) -> Result<(Matrix, Matrix)> {
    if frontend.frame_len != prosody.frame_len || frontend.hop != prosody.hop {
        return Err(Error::config("frontend and prosody framing must match"));
    }
    let features = encode_frontend(a, frontend)?;
    let p = extract_prosody(a, prosody)?;
    if features.rows() == 0 {
        return Err(Error::dim("clip is shorter than one analysis frame"));
    }
    Ok((features, p.normalized))
}

/// Audio to `(f_h, f_e)`, both `T x D`, in eval mode.
pub fn dpse_forward(
    model: &Dpse,
    a: &AudioClip,
    frontend: &FrontendConfig,
    prosody: &ProsodyConfig,
    t: usize,
) -> Result<(Matrix, Matrix)> {
    let (features, p) = speech_inputs(a, frontend, prosody)?;
    model.encode(&features, &p, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{grad_check, pool_matrix};
    use crate::prosody::tone;

    fn small(dilations: Vec<usize>) -> DpseConfig {
        DpseConfig {
            input_dim: 6,
            dim: 8,
            dilations,
            kernel_size: 3,
            groups: 2,
            heads: 2,
            ..Default::default()
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn config_validation() {
        assert!(DpseConfig::default().validate().is_ok());
        for bad in [
            DpseConfig { groups: 3, ..small(vec![1]) },
            DpseConfig { heads: 3, ..small(vec![1]) },
            DpseConfig { kernel_size: 4, ..small(vec![1]) },
            small(vec![]),
        ] {
            assert!(matches!(Dpse::new(bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zeroed_msdc_is_a_pure_residual() {
        let mut m = Dpse::new(small(vec![1, 2])).unwrap();
        for b in m.msdc.branches.clone() {
            m.store.value_mut(b.kernel).fill(0.0);
        }
        for id in m.msdc.project.params() {
            m.store.value_mut(id).fill(0.0);
        }
        let x = Matrix::random_normal(7, 8, 1.0, &mut rng());
        let mut tape = Tape::new(&m.store);
        let xv = tape.constant(x.clone());
        let y = m.msdc.forward(&mut tape, xv, 0.1, None).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn eval_mode_is_repeatable_and_train_mode_drops() {
        let m = Dpse::new(small(vec![1, 2, 4])).unwrap();
        let x = Matrix::random_normal(10, 8, 1.0, &mut rng());
        let run = |train: Option<u64>| {
            let mut tape = Tape::new(&m.store);
            let xv = tape.constant(x.clone());
            let mut r = train.map(ChaCha8Rng::seed_from_u64);
            let y = m.msdc.forward(&mut tape, xv, 0.5, r.as_mut()).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(None), run(None));
        assert_ne!(run(None), run(Some(1)));
        assert_eq!(run(Some(1)), run(Some(1)));
    }

    // Single branch written out with plain loops.
    fn msdc_oracle(m: &Dpse, x: &Matrix) -> Matrix {
        let s = &m.store;
        let b = &m.msdc.branches[0];
        let k = s.value(b.kernel);
        let (t_len, d) = x.shape();
        let half = (k.rows() / 2) as i64;
        let mut conv = Matrix::zeros(t_len, d);
        for t in 0..t_len {
            for c in 0..d {
                for j in 0..k.rows() {
                    let src = t as i64 + (j as i64 - half) * b.dilation as i64;
                    if src >= 0 && (src as usize) < t_len {
                        conv[(t, c)] += k[(j, c)] * x[(src as usize, c)];
                    }
                }
            }
        }
        let g = m.msdc.groups;
        let gs = d / g;
        let mut normed = Matrix::zeros(t_len, d);
        for t in 0..t_len {
            for grp in 0..g {
                let vals: Vec<f64> = (0..gs).map(|i| conv[(t, grp * gs + i)]).collect();
                let mean = vals.iter().sum::<f64>() / gs as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / gs as f64;
                for i in 0..gs {
                    let c = grp * gs + i;
                    normed[(t, c)] = (vals[i] - mean) / (var + 1e-5).sqrt() * s.value(b.norm_gain)[(0, c)]
                        + s.value(b.norm_bias)[(0, c)];
                }
            }
        }
        let lin = |x: &Matrix, l: &Linear| {
            let mut y = x.matmul(s.value(l.weight));
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    y[(r, c)] += s.value(l.bias.unwrap())[(0, c)];
                }
            }
            y
        };
        let wide = lin(&normed, &b.widen);
        let gated = Matrix::from_fn(t_len, d, |t, c| wide[(t, c)] / (1.0 + (-wide[(t, c + d)]).exp()));
        let branch = lin(&gated, &b.pointwise);
        let mut out = lin(&branch, &m.msdc.project);
        out.add_assign(x);
        out
    }

    #[test]
    fn single_branch_msdc_matches_loop_oracle() {
        let mut cfg = small(vec![2]);
        cfg.input_dim = 8;
        let mut m = Dpse::new(cfg).unwrap();
        let b = m.msdc.branches[0].clone();
        let mut delta = Matrix::zeros(3, 8);
        delta.row_mut(1).fill(1.0);
        delta.row_mut(2).fill(0.5);
        *m.store.value_mut(b.kernel) = delta;
        let x = Matrix::random_normal(4, 8, 1.0, &mut rng());
        let mut tape = Tape::new(&m.store);
        let xv = tape.constant(x.clone());
        let y = m.msdc.forward(&mut tape, xv, 0.1, None).unwrap();
        assert!(tape.value(y).max_abs_diff(&msdc_oracle(&m, &x)) < 1e-12);
    }

    #[test]
    fn constant_input_gives_constant_head_features() {
        let mut m = Dpse::new(small(vec![1])).unwrap();
        m.head.coarse.zero_outputs(&mut m.store);
        m.head.fine.zero_outputs(&mut m.store);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let h = Matrix::from_fn(20, 8, |_, c| row[c]);
        let mut tape = Tape::new(&m.store);
        let hv = tape.constant(h);
        let f = m.head_pose_branch(&mut tape, hv, 9).unwrap();
        let f = tape.value(f);
        assert_eq!(f.shape(), (9, 8));
        for t in 1..9 {
            for c in 0..8 {
                assert!((f[(t, c)] - f[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_branch_shape_for_any_length() {
        let m = Dpse::new(small(vec![1])).unwrap();
        for n in [1, 2, 5, 31] {
            for t in [1, 3, 12, 40] {
                let mut tape = Tape::new(&m.store);
                let hv = tape.constant(Matrix::random_normal(n, 8, 1.0, &mut rng()));
                let f = m.head_pose_branch(&mut tape, hv, t).unwrap();
                assert_eq!(tape.shape(f), (t, 8));
                let e = m.expression_branch(&mut tape, hv, None, t).unwrap();
                assert_eq!(tape.shape(e), (t, 8));
            }
        }
        let mut tape = Tape::new(&m.store);
        let hv = tape.constant(Matrix::zeros(4, 8));
        assert!(matches!(m.head_pose_branch(&mut tape, hv, 0), Err(Error::Config(_))));
    }

    // Six-frame toy with one head, identity projections and zero FFN output:
    // every step evaluated by hand with plain matrices.
    #[test]
    fn head_branch_matches_hand_assembled_oracle() {
        let mut cfg = small(vec![1]);
        cfg.heads = 1;
        cfg.dim = 2;
        cfg.groups = 1;
        let mut m = Dpse::new(cfg.clone()).unwrap();
        for r in [&m.head.coarse.clone(), &m.head.fine.clone()] {
            for id in [r.attention.wq, r.attention.wk, r.attention.wv, r.attention.out.weight, r.input.weight] {
                *m.store.value_mut(id) = Matrix::identity(2);
            }
            for id in [r.attention.out.bias.unwrap(), r.input.bias.unwrap()] {
                m.store.value_mut(id).fill(0.0);
            }
            r.ffn.zero_output(&mut m.store);
        }
        let h = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
            vec![-1.0, 0.2],
            vec![0.3, -0.7],
            vec![0.0, 0.0],
        ]);
        let t = 4;
        let attend = |q: &Matrix| {
            let scores = q.matmul(&h.transpose()).scaled(1.0 / 2f64.sqrt());
            let mut w = scores.clone();
            for r in 0..w.rows() {
                let mx = scores.row(r).iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.row(r).iter().map(|s| (s - mx).exp()).sum();
                for c in 0..w.cols() {
                    w[(r, c)] = (scores[(r, c)] - mx).exp() / z;
                }
            }
            let mut out = w.matmul(&h);
            out.add_assign(q);
            out
        };
        let (nc, nf) = head_token_counts(t);
        let coarse = attend(&pool_matrix(6, nc, cfg.window_coarse * cfg.feature_rate).matmul(&h));
        let fine = attend(&pool_matrix(6, nf, cfg.window_fine * cfg.feature_rate).matmul(&h));
        let cat = Matrix::hconcat(&[
            &pool_matrix(nc, t, 1.0).matmul(&coarse),
            &pool_matrix(nf, t, 1.0).matmul(&fine),
        ]);
        let mut expect = cat.matmul(m.store.value(m.head.fuse.weight));
        for r in 0..t {
            for c in 0..2 {
                expect[(r, c)] += m.store.value(m.head.fuse.bias.unwrap())[(0, c)];
            }
        }
        let mut tape = Tape::new(&m.store);
        let hv = tape.constant(h.clone());
        let f = m.head_pose_branch(&mut tape, hv, t).unwrap();
        assert!(tape.value(f).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn film_identity_matches_unmodulated_path() {
        let mut m = Dpse::new(small(vec![1])).unwrap();
        for id in [m.expression.gamma.weight, m.expression.beta.weight] {
            m.store.value_mut(id).fill(0.0);
        }
        let h = Matrix::random_normal(12, 8, 1.0, &mut rng());
        let p = Matrix::random_normal(12, 2, 1.0, &mut rng());
        let mut tape = Tape::new(&m.store);
        let (hv, pv) = (tape.constant(h), tape.constant(p));
        let with = m.expression_branch(&mut tape, hv, Some(pv), 5).unwrap();
        let without = m.expression_branch(&mut tape, hv, None, 5).unwrap();
        assert!(tape.value(with).max_abs_diff(tape.value(without)) < 1e-12);

        // Zero prosody with the default (1, 0) biases is the identity too.
        let m = Dpse::new(small(vec![1])).unwrap();
        let mut tape = Tape::new(&m.store);
        let hv = tape.constant(Matrix::random_normal(12, 8, 1.0, &mut rng()));
        let zero = tape.constant(Matrix::zeros(12, 2));
        let with = m.expression_branch(&mut tape, hv, Some(zero), 5).unwrap();
        let without = m.expression_branch(&mut tape, hv, None, 5).unwrap();
        assert!(tape.value(with).max_abs_diff(tape.value(without)) < 1e-12);

        let short = tape.constant(Matrix::zeros(11, 2));
        assert!(matches!(m.expression_branch(&mut tape, hv, Some(short), 5), Err(Error::Dimension(_))));
    }

    #[test]
    fn all_parameters_pass_grad_check() {
        let mut cfg = small(vec![1, 2]);
        cfg.dim = 4;
        cfg.input_dim = 3;
        cfg.heads = 2;
        let m = Dpse::new(cfg).unwrap();
        let mut r = rng();
        let x = Matrix::random_normal(9, 3, 1.0, &mut r);
        let p = Matrix::random_normal(9, 2, 1.0, &mut r);
        let err = grad_check(
            &m.store,
            |tape| {
                let xv = tape.constant(x.clone());
                let pv = tape.constant(p.clone());
                let (h, e) = m.forward(tape, xv, pv, 5, None)?;
                let both = tape.concat_cols(&[h, e]);
                let sq = tape.square(both);
                Ok(tape.mean(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn audio_forward_is_a_composition_of_stages() {
        let frontend = FrontendConfig {
            out_dim: 6,
            ..Default::default()
        };
        let prosody = ProsodyConfig::default();
        let m = Dpse::new(small(vec![1, 2])).unwrap();
        let clip = tone(180.0, 0.5, 0.3);
        let (f_h, f_e) = dpse_forward(&m, &clip, &frontend, &prosody, 12).unwrap();
        assert_eq!((f_h.shape(), f_e.shape()), ((12, 8), (12, 8)));
        let again = dpse_forward(&m, &clip, &frontend, &prosody, 12).unwrap();
        assert_eq!((f_h.clone(), f_e.clone()), again);

        let feats = encode_frontend(&clip, &frontend).unwrap();
        let pros = extract_prosody(&clip, &prosody).unwrap().normalized;
        let mut tape = Tape::new(&m.store);
        let fv = tape.constant(feats);
        let h_s = m.shared(&mut tape, fv, None).unwrap();
        let h = m.head_pose_branch(&mut tape, h_s, 12).unwrap();
        let pv = tape.constant(pros);
        let e = m.expression_branch(&mut tape, h_s, Some(pv), 12).unwrap();
        assert!(tape.value(h).max_abs_diff(&f_h) < 1e-12);
        assert!(tape.value(e).max_abs_diff(&f_e) < 1e-12);
    }
}
