//! Finite-difference gradient checks over every differentiable op, layer,
//! block, the full frontend and both losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckReport, Tape, Tensor, Var, MASK_NEG};
use crate::error::Result;
use crate::losses::{asr_loss, masked_lfbe, spectral_loss, FrozenEncoder};
use crate::model::{
    Attention, ArchConfig, ConformerBlock, CrossAttentionBlock, Film, FrontendModel, InputVars,
    ModulatedConformerBlock, ParamStore, Params, Visibility,
};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
// the five-point stencil tolerates a wide step, which keeps round-off small
const EPS: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ w ⊙ y` with fixed random `w`, so no gradient entry vanishes by symmetry.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&y.shape(), &mut rng, -1.0, 1.0);
    y.mul(y.tape().constant(w))?.sum()
}

/// Gradient check with inputs `xs` followed by every parameter of `store`.
fn check_with_params<Fun>(xs: Vec<Tensor<f64>>, store: &ParamStore<f64>, f: Fun) -> Result<GradCheckReport>
where
    Fun: for<'t> Fn(&[Var<'t, f64>], &Params<'t, f64>) -> Result<Var<'t, f64>>,
{
    let n = xs.len();
    let mut inputs = xs;
    inputs.extend(store.tensors());
    grad_check(|_, v| f(&v[..n], &Params::from_vars(v[n..].to_vec())), &inputs, EPS)
}

fn jittered(mut store: ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    store.jitter(seed, 0.1);
    store
}

/// Small architecture used by the block and frontend checks.
pub fn suite_arch() -> ArchConfig {
    ArchConfig::tiny(8)
}

/// Run the whole suite. Each case reports its worst relative error.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut push = |name: &str, r: GradCheckReport| {
        cases.push(SuiteCase {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            checked: r.checked,
        })
    };

    let (r, c) = (3, 4);
    let a = random(&[r, c], &mut rng, -1.0, 1.0);
    let b = random(&[r, c], &mut rng, -1.0, 1.0);
    let row = random(&[c], &mut rng, -1.0, 1.0);
    // away from the kinks of relu/abs so central differences stay one-sided
    let kinked = Tensor::from_fn(&[r, c], |i| if i % 2 == 0 { 0.2 + 0.1 * i as f64 } else { -0.3 - 0.05 * i as f64 });

    push("add/sub/mul", grad_check(|_, v| probe(v[0].add(v[1])?.mul(v[0].sub(v[1])?)?, 1), &[a.clone(), b.clone()], EPS)?);
    push(
        "add_row/mul_row/scale/add_scalar",
        grad_check(|_, v| probe(v[0].add_row(v[1])?.mul_row(v[1])?.scale(0.7)?.add_scalar(0.3)?, 2), &[a.clone(), row.clone()], EPS)?,
    );
    push("sigmoid", grad_check(|_, v| probe(v[0].sigmoid()?, 3), &[a.clone()], EPS)?);
    push("swish", grad_check(|_, v| probe(v[0].swish()?, 4), &[a.clone()], EPS)?);
    push("relu", grad_check(|_, v| probe(v[0].relu()?, 5), &[kinked.clone()], EPS)?);
    push("abs", grad_check(|_, v| probe(v[0].abs()?, 6), &[kinked.clone()], EPS)?);
    push("ln_floor", grad_check(|_, v| probe(v[0].abs()?.add_scalar(0.5)?.ln_floor(1e-10)?, 7), &[kinked], EPS)?);
    let w = random(&[c, 5], &mut rng, -1.0, 1.0);
    let bias = random(&[5], &mut rng, -1.0, 1.0);
    push("matmul", grad_check(|_, v| probe(v[0].matmul(v[1])?, 8), &[a.clone(), w.clone()], EPS)?);
    push("affine", grad_check(|_, v| probe(v[0].affine(v[1], v[2])?, 9), &[a.clone(), w, bias], EPS)?);
    push("transpose/reshape", grad_check(|_, v| probe(v[0].transpose()?.reshape(&[2, 6])?, 10), &[a.clone()], EPS)?);
    push(
        "concat/slice",
        grad_check(
            |tape, v| {
                let cat = tape.concat(&[v[0], v[1]], 1)?;
                let rows = tape.concat(&[cat, cat.scale(2.0)?], 0)?;
                probe(rows.slice(1, 1, 4)?.slice(0, 1, 4)?, 11)
            },
            &[a.clone(), b.clone()],
            EPS,
        )?,
    );
    push("gather_rows", grad_check(|_, v| probe(v[0].gather_rows(&[2, 0, 0, 1, 2])?, 12), &[a.clone()], EPS)?);
    push("sum/mean", grad_check(|_, v| v[0].mul(v[0])?.mean()?.add(v[0].sum()?.scale(0.1)?), &[a.clone()], EPS)?);
    let mask = Tensor::from_fn(&[r, c], |i| if i % c <= i / c { 0.0 } else { MASK_NEG });
    push("softmax (masked)", grad_check(|_, v| probe(v[0].softmax(Some(&mask))?, 13), &[a.clone()], EPS)?);
    let gamma = random(&[c], &mut rng, 0.5, 1.5);
    push(
        "layer_norm",
        grad_check(|_, v| probe(v[0].layer_norm(v[1], v[2], 1e-5)?, 14), &[a.clone(), gamma, row.clone()], EPS)?,
    );
    push("glu", grad_check(|_, v| probe(v[0].glu()?, 15), &[a.clone()], EPS)?);
    let kernel = random(&[3, c], &mut rng, -1.0, 1.0);
    push(
        "causal_depthwise_conv1d",
        grad_check(|_, v| probe(v[0].causal_depthwise_conv1d(v[1], v[2])?, 16), &[a.clone(), kernel, row], EPS)?,
    );
    push(
        "dropout",
        grad_check(|_, v| probe(v[0].dropout(0.3, &mut ChaCha8Rng::seed_from_u64(17))?, 17), &[a], EPS)?,
    );

    let cfg = suite_arch();
    let d = cfg.d_model;
    let (t, s) = (4, 3);
    let x = random(&[t, d], &mut rng, -1.0, 1.0);
    let n = random(&[s, d], &mut rng, -1.0, 1.0);
    let m = random(&[1, cfg.dvec_dim], &mut rng, -1.0, 1.0);

    let (film, store) = Film::init::<f64>(cfg.dvec_dim, d, seed);
    push(
        "film",
        check_with_params(vec![x.clone(), m.clone()], &jittered(store, seed), |v, p| probe(film.forward(p, v[0], v[1])?, 20))?,
    );
    let (attn, store) = Attention::init::<f64>(d, cfg.n_heads, false, seed);
    let window = Visibility::Causal { window: cfg.attn_window_past };
    push(
        "self-attention (windowed)",
        check_with_params(vec![x.clone()], &jittered(store, seed), |v, p| probe(attn.forward(p, v[0], None, window)?, 21))?,
    );
    let (attn, store) = Attention::init::<f64>(d, cfg.n_heads, true, seed);
    push(
        "cross-attention",
        check_with_params(vec![x.clone(), n.clone()], &jittered(store, seed), |v, p| {
            probe(attn.forward(p, v[0], Some(v[1]), Visibility::All)?, 22)
        })?,
    );
    let (block, store) = ConformerBlock::init::<f64>(&cfg, seed);
    push(
        "conformer block",
        check_with_params(vec![x.clone()], &jittered(store, seed), |v, p| {
            probe(block.forward(p, v[0], cfg.attn_window_past)?, 23)
        })?,
    );
    let (block, store) = ModulatedConformerBlock::init::<f64>(&cfg, seed);
    push(
        "modulated conformer block",
        check_with_params(vec![x.clone(), m.clone()], &jittered(store, seed), |v, p| {
            probe(block.forward(p, v[0], v[1], cfg.attn_window_past)?, 24)
        })?,
    );
    let (block, store) = CrossAttentionBlock::init::<f64>(&cfg, seed);
    push(
        "cross-attention block",
        check_with_params(vec![x, m, n], &jittered(store, seed), |v, p| {
            probe(block.forward(p, v[0], v[1], v[2], cfg.attn_window_past)?, 25)
        })?,
    );

    let mut model = FrontendModel::<f64>::new(cfg.clone(), seed)?;
    model.params.jitter(seed ^ 1, 0.1);
    let inputs = vec![
        random(&[t, cfg.n_mels], &mut rng, -2.0, 2.0),
        random(&[t, cfg.n_mels], &mut rng, -2.0, 2.0),
        random(&[s, cfg.n_mels], &mut rng, -2.0, 2.0),
        random(&[1, cfg.dvec_dim], &mut rng, -1.0, 1.0),
    ];
    push(
        "frontend",
        check_with_params(inputs, &model.params, |v, p| {
            let x = InputVars {
                noisy: v[0],
                reference: v[1],
                context: v[2],
                dvector: v[3],
            };
            probe(model.forward(p, &x)?, 26)
        })?,
    );

    let est = random(&[t, cfg.n_mels], &mut rng, 0.05, 0.95);
    let irm = random(&[t, cfg.n_mels], &mut rng, 0.0, 1.0);
    push(
        "spectral loss",
        grad_check(|tape, v| spectral_loss(v[0], tape.constant(irm.clone())), &[est], EPS)?,
    );
    let enc = FrozenEncoder::<f64>::default();
    let frames = 4;
    let noisy = random(&[frames, crate::features::N_MELS], &mut rng, 0.01, 2.0);
    let clean = random(&[frames, crate::features::N_MELS], &mut rng, -3.0, 0.5);
    let mask = random(&[frames, crate::features::N_MELS], &mut rng, 0.05, 0.95);
    push(
        "asr loss",
        grad_check(
            |tape: &Tape<f64>, v| asr_loss(masked_lfbe(tape.constant(noisy.clone()), v[0])?, &clean, &enc),
            &[mask],
            EPS,
        )?,
    );
    Ok(cases)
}
