use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&y.shape(), &mut rng);
    y.mul(y.tape().constant(w))?.sum()
}

/// Straight-line f64 implementation of the blocks, reading parameters by name.
struct Reference {
    p: HashMap<String, Tensor<f64>>,
}

type M = Vec<Vec<f64>>;

fn rows(t: &Tensor<f64>) -> M {
    let (r, c) = t.matrix_dims();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

fn scale(a: &M, s: f64) -> M {
    a.iter().map(|x| x.iter().map(|u| u * s).collect()).collect()
}

fn matmul(a: &M, b: &M) -> M {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

fn assert_close(var: Var<'_, f64>, want: &M, what: &str) {
    let got = rows(&var.value());
    for (t, (g, w)) in got.iter().zip(want).enumerate() {
        for (c, (a, b)) in g.iter().zip(w).enumerate() {
            assert!((a - b).abs() < 1e-10, "{what}[{t},{c}]: {a} vs {b}");
        }
    }
}

impl Reference {
    fn new(store: &ParamStore<f64>) -> Self {
        Self {
            p: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.p[name].data().to_vec()
    }

    fn dense(&self, x: &M, pre: &str) -> M {
        let w = rows(&self.p[&format!("{pre}.w")]);
        let b = match self.p.get(&format!("{pre}.b")) {
            Some(b) => b.data().to_vec(),
            None => vec![0.0; w[0].len()],
        };
        matmul(x, &w)
            .into_iter()
            .map(|r| r.iter().zip(&b).map(|(u, v)| u + v).collect())
            .collect()
    }

    fn ln(&self, x: &M, pre: &str) -> M {
        let g = self.vec(&format!("{pre}.gamma"));
        let b = self.vec(&format!("{pre}.beta"));
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let rstd = 1.0 / (var + LN_EPS).sqrt();
                r.iter().enumerate().map(|(c, v)| (v - mean) * rstd * g[c] + b[c]).collect()
            })
            .collect()
    }

    fn ffn(&self, x: &M, pre: &str) -> M {
        let h = self.dense(&self.ln(x, &format!("{pre}.norm")), &format!("{pre}.up"));
        let h: M = h.iter().map(|r| r.iter().map(|&v| v * sig(v)).collect()).collect();
        self.dense(&h, &format!("{pre}.down"))
    }

    fn half_ffn(&self, x: &M, pre: &str) -> M {
        add(x, &scale(&self.ffn(x, pre), 0.5))
    }

    fn conv(&self, x: &M, pre: &str) -> M {
        let h = self.dense(&self.ln(x, &format!("{pre}.norm")), &format!("{pre}.pw_in"));
        let d = h[0].len() / 2;
        let g: M = h.iter().map(|r| (0..d).map(|c| r[c] * sig(r[c + d])).collect()).collect();
        let w = rows(&self.p[&format!("{pre}.dw_w")]);
        let b = self.vec(&format!("{pre}.dw_b"));
        let k = w.len();
        let conv: M = (0..g.len())
            .map(|t| {
                (0..d)
                    .map(|c| {
                        let mut acc = b[c];
                        for (j, wj) in w.iter().enumerate() {
                            let src = t as isize - (k as isize - 1) + j as isize;
                            if src >= 0 {
                                acc += wj[c] * g[src as usize][c];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        let h = self.ln(&conv, &format!("{pre}.norm_mid"));
        let h: M = h.iter().map(|r| r.iter().map(|&v| v * sig(v)).collect()).collect();
        self.dense(&h, &format!("{pre}.pw_out"))
    }

    /// `window = None` lets every query see every key.
    fn attention(&self, x: &M, kv: Option<&M>, pre: &str, heads: usize, window: Option<usize>) -> M {
        let xq = self.ln(x, &format!("{pre}.norm"));
        let src = match kv {
            None => xq.clone(),
            Some(n) => self.ln(n, &format!("{pre}.norm_kv")),
        };
        let q = self.dense(&xq, &format!("{pre}.q"));
        let k = self.dense(&src, &format!("{pre}.k"));
        let v = self.dense(&src, &format!("{pre}.v"));
        let d = q[0].len();
        let dh = d / heads;
        let mut out = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            for t in 0..q.len() {
                let visible: Vec<usize> = (0..k.len())
                    .filter(|&s| window.is_none_or(|w| s <= t && t - s < w))
                    .collect();
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|&s| (0..dh).map(|i| q[t][h * dh + i] * k[s][h * dh + i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for (a, &s) in e.iter().zip(&visible) {
                    for i in 0..dh {
                        out[t][h * dh + i] += a / z * v[s][h * dh + i];
                    }
                }
            }
        }
        self.dense(&out, &format!("{pre}.o"))
    }

    fn film(&self, x: &M, m: &M, pre: &str) -> M {
        let r = &self.dense(m, &format!("{pre}.r"))[0];
        let h = &self.dense(m, &format!("{pre}.h"))[0];
        x.iter()
            .map(|row| row.iter().enumerate().map(|(c, v)| v + r[c] * v + h[c]).collect())
            .collect()
    }
}

fn tiny_cfg() -> ArchConfig {
    ArchConfig::tiny(8)
}

#[test]
fn conformer_block_matches_reference() {
    let cfg = ArchConfig {
        attn_window_past: 3,
        ..tiny_cfg()
    };
    let (block, mut store) = ConformerBlock::init::<f64>(&cfg, 1);
    store.jitter(2, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[7, 8], &mut rng);

    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let tr = block.trace(&p, tape.constant(x.clone()), cfg.attn_window_past).unwrap();

    let r = Reference::new(&store);
    let x = rows(&x);
    let x1 = r.half_ffn(&x, "ff1");
    let x2 = add(&x1, &r.conv(&x1, "conv"));
    let x3 = add(&x2, &r.attention(&x2, None, "mhsa", cfg.n_heads, Some(3)));
    let y = r.ln(&r.half_ffn(&x3, "ff2"), "norm_out");
    assert_close(tr.after_ff1, &x1, "x'");
    assert_close(tr.after_conv, &x2, "x''");
    assert_close(tr.after_mhsa, &x3, "x'''");
    assert_close(tr.output, &y, "y");
}

#[test]
fn cross_block_matches_reference() {
    let cfg = tiny_cfg();
    let (block, mut store) = CrossAttentionBlock::init::<f64>(&cfg, 4);
    store.jitter(5, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, m, n) = (
        random(&[5, 8], &mut rng),
        random(&[1, 6], &mut rng),
        random(&[4, 8], &mut rng),
    );

    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let tr = block
        .trace(
            &p,
            tape.constant(x.clone()),
            tape.constant(m.clone()),
            tape.constant(n.clone()),
            cfg.attn_window_past,
        )
        .unwrap();

    let r = Reference::new(&store);
    let (x, m, n) = (rows(&x), rows(&m), rows(&n));
    let heads = cfg.n_heads;
    let x_hat = r.film(&x, &m, "film");
    let x_tilde = r.half_ffn(&x_hat, "ff1_x");
    let n_tilde = r.half_ffn(&n, "ff1_n");
    let x1 = add(&x_tilde, &r.conv(&x_tilde, "conv_x"));
    let n1 = add(&n_tilde, &r.conv(&n_tilde, "conv_n"));
    let x2 = add(&x1, &r.attention(&x1, Some(&n1), "mhca_ctx", heads, None));
    let rr = r.dense(&x2, "frame_r");
    let hh = r.dense(&x2, "frame_h");
    let x3: M = (0..x1.len())
        .map(|t| (0..8).map(|c| x1[t][c] * rr[t][c] + hh[t][c]).collect())
        .collect();
    let x4 = add(&x1, &r.attention(&x1, Some(&x3), "mhca_mod", heads, Some(cfg.attn_window_past)));
    let y = r.ln(&r.half_ffn(&x4, "ff2"), "norm_out");
    assert_close(tr.x_hat, &x_hat, "x_hat");
    assert_close(tr.x_tilde, &x_tilde, "x_tilde");
    assert_close(tr.n_tilde, &n_tilde, "n_tilde");
    assert_close(tr.x1, &x1, "x'");
    assert_close(tr.n1, &n1, "n'");
    assert_close(tr.x2, &x2, "x''");
    assert_close(tr.x3, &x3, "x'''");
    assert_close(tr.x4, &x4, "x''''");
    assert_close(tr.output, &y, "y");
}

#[test]
fn film_identity_and_doubling() {
    let (film, mut store) = Film::init::<f64>(3, 4, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[5, 4], &mut rng);
    let m = random(&[1, 3], &mut rng);
    let run = |store: &ParamStore<f64>| {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let y = film.forward(&p, tape.constant(x.clone()), tape.constant(m.clone())).unwrap();
        (*y.value()).clone()
    };
    assert_eq!(run(&store), x);
    // r(m) = 1 via the bias, h(m) = 0
    let mut values = store.tensors();
    values[1] = Tensor::ones(&[4]);
    store.set_all(values).unwrap();
    let doubled = Tensor::from_fn(&[5, 4], |i| 2.0 * x.data()[i]);
    assert_eq!(run(&store), doubled);
}

#[test]
fn modulated_block_with_zero_film_is_plain_block() {
    let cfg = tiny_cfg();
    let (mb, store) = ModulatedConformerBlock::init::<f64>(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[6, 8], &mut rng);
    let m = random(&[1, 6], &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let xv = tape.constant(x);
    let a = mb.forward(&p, xv, tape.constant(m), cfg.attn_window_past).unwrap();
    let b = mb.block.forward(&p, xv, cfg.attn_window_past).unwrap();
    assert_eq!(*a.value(), *b.value());
}

#[test]
fn conformer_block_keeps_shape() {
    let cfg = ArchConfig::default();
    let (block, store) = ConformerBlock::init::<f32>(&cfg, 0);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(Tensor::from_fn(&[37, 256], |i| ((i * 7919) % 13) as f32 / 13.0 - 0.5));
    let y = block.forward(&p, x, 65).unwrap();
    assert_eq!(y.shape(), vec![37, 256]);
}

#[test]
fn single_context_frame_gets_uniform_attention() {
    let (att, store) = Attention::init::<f64>(8, 2, true, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(random(&[5, 8], &mut rng));
    let n = tape.constant(random(&[1, 8], &mut rng));
    let y = att.forward(&p, x, Some(n), Visibility::All).unwrap();
    let y = y.value();
    assert_eq!(y.shape(), &[5, 8]);
    for t in 1..5 {
        assert_eq!(y.row(t), y.row(0));
    }
}

#[test]
fn empty_context_is_an_error() {
    let (att, store) = Attention::init::<f64>(8, 2, true, 3);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(Tensor::zeros(&[5, 8]));
    let n = tape.constant(Tensor::zeros(&[0, 8]));
    let err = att.forward(&p, x, Some(n), Visibility::All).unwrap_err();
    assert!(matches!(err, Error::EmptyAuxiliary));
    assert_eq!(err.to_string(), "empty auxiliary sequence");
}

#[test]
fn chunked_window_attention_matches_dense_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (t, d) = (150, 8);
    let tape = Tape::new();
    let q = tape.constant(random(&[t, d], &mut rng));
    let k = tape.constant(random(&[t, d], &mut rng));
    let v = tape.constant(random(&[t, d], &mut rng));
    let chunked = multi_head_attention(q, k, v, 2, Visibility::Causal { window: 65 }).unwrap();
    let mask = local_causal_mask(t, 65);
    let dense: Vec<Var<'_, f64>> = (0..2)
        .map(|h| {
            let (qh, kh, vh) = (
                q.slice(1, h * 4, 4).unwrap(),
                k.slice(1, h * 4, 4).unwrap(),
                v.slice(1, h * 4, 4).unwrap(),
            );
            let scores = qh.matmul(kh.transpose().unwrap()).unwrap().scale(0.5).unwrap();
            scores.softmax(Some(&mask)).unwrap().matmul(vh).unwrap()
        })
        .collect();
    let dense = tape.concat(&dense, 1).unwrap();
    assert!(chunked.value().max_abs_diff(&dense.value()) < 1e-12);
}

#[test]
fn local_mask_window_includes_self() {
    let m = local_causal_mask::<f64>(70, 65);
    let visible = |t: usize| (0..70).filter(|&s| m.row(t)[s] == 0.0).collect::<Vec<_>>();
    assert_eq!(visible(0), vec![0]);
    assert_eq!(visible(69), (5..=69).collect::<Vec<_>>());
    assert_eq!(visible(69).len(), 65);
}

fn tiny_input(cfg: &ArchConfig, t: usize, s: usize, seed: u64) -> FrontendInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FrontendInput {
        noisy: random(&[t, cfg.n_mels], &mut rng),
        reference: random(&[t, cfg.n_mels], &mut rng),
        context: random(&[s, cfg.n_mels], &mut rng),
        dvector: random(&[1, cfg.dvec_dim], &mut rng),
    }
}

fn check_frontend(model: &FrontendModel<f64>, input: &FrontendInput<f64>) -> f64 {
    let mut inputs = vec![
        input.noisy.clone(),
        input.reference.clone(),
        input.context.clone(),
        input.dvector.clone(),
    ];
    inputs.extend(model.params.tensors());
    let report = grad_check(
        |_tape, v| {
            let x = InputVars {
                noisy: v[0],
                reference: v[1],
                context: v[2],
                dvector: v[3],
            };
            let p = Params::from_vars(v[4..].to_vec());
            probe(model.forward(&p, &x)?, 77)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    report.max_rel_err
}

#[test]
fn frontend_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut model = FrontendModel::<f64>::new(cfg.clone(), 1).unwrap();
    model.params.jitter(2, 0.1);
    let err = check_frontend(&model, &tiny_input(&cfg, 4, 3, 3));
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn frontend_mask_range_and_absent_side_inputs() {
    let cfg = ArchConfig {
        d_model: 16,
        ..ArchConfig::desk()
    };
    let model = FrontendModel::<f32>::new(cfg.clone(), 0).unwrap();
    let t = 12;
    let input = FrontendInput {
        noisy: Tensor::from_fn(&[t, 128], |i| ((i % 17) as f32) - 8.0),
        reference: Tensor::full(&[t, 128], crate::features::LOG_FLOOR.ln()),
        context: Tensor::from_fn(&[20, 128], |i| ((i % 5) as f32) - 2.0),
        dvector: Tensor::zeros(&[1, 256]),
    };
    let mask = model.predict(&input).unwrap();
    assert_eq!(mask.shape(), &[t, 128]);
    assert!(mask.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn frontend_is_causal_in_noisy_frames() {
    let cfg = ArchConfig {
        attn_window_past: 4,
        ..tiny_cfg()
    };
    let mut model = FrontendModel::<f64>::new(cfg.clone(), 3).unwrap();
    model.params.jitter(1, 0.3);
    let a = tiny_input(&cfg, 10, 4, 8);
    let cut = 5;
    let mut b = a.clone();
    for i in (cut + 1) * cfg.n_mels..b.noisy.numel() {
        b.noisy.data_mut()[i] += 3.0;
        b.reference.data_mut()[i] -= 2.0;
    }
    let (ma, mb) = (model.predict(&a).unwrap(), model.predict(&b).unwrap());
    for t in 0..10 {
        let diff: f64 = ma.row(t).iter().zip(mb.row(t)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if t <= cut {
            assert_eq!(diff, 0.0, "frame {t}");
        } else {
            assert!(diff > 0.0, "frame {t} ignores its input");
        }
    }
}

#[test]
fn paper_config_parameter_count_is_plausible() {
    let model = FrontendModel::<f32>::new(ArchConfig::paper(), 0).unwrap();
    let n = model.num_params();
    assert!((10_000_000..=20_000_000).contains(&n), "{n} parameters");
    let aec = FrontendModel::<f32>::new(ArchConfig::aec_only(), 0).unwrap();
    assert!(aec.num_params() > 0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ArchConfig {
        d_model: 16,
        ..ArchConfig::desk()
    };
    let mut model = FrontendModel::<f32>::new(cfg, 5).unwrap();
    model.params.jitter(6, 0.01);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, 42, dir.path()).unwrap();
    let (loaded, step) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(step, 42);
    assert_eq!(loaded.params, model.params);
}

#[test]
fn checkpoint_with_missing_blob_names_it() {
    let model = FrontendModel::<f32>::new(ArchConfig::tiny(8), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, 0, dir.path()).unwrap();
    let blob = dir.path().join("decoder.w.f32");
    std::fs::remove_file(&blob).unwrap();
    let msg = load_checkpoint(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("decoder.w.f32"), "{msg}");
}
