//! Finite-difference checks over every differentiable op and a one-block
//! model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{branch_input, embed, encode_branch, init_params, linear_head, multi_head_attention, project, AttentionParams, Branch, ModelConfig};
use crate::objective::{align_loss, cross_corr_loss};
use crate::rng;
use crate::tensor::gradcheck::check;
use crate::tensor::{ModelParams, Tensor};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

type CaseFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

/// Values in `±[0.1, 1]`, kept away from the kinks of relu and friends.
fn signed(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = r.gen_range(0.1..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(v, shape).expect("valid shape")
}

fn positive(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| r.gen_range(0.5..2.0)).collect(), shape).expect("valid shape")
}

/// Contract `y` with fixed random weights so every output element matters.
fn weigh(y: Tensor, seed: u64) -> Result<Tensor> {
    let mut r = rng::stream(seed, &[99, y.numel() as u64]);
    let w = Tensor::new((0..y.numel()).map(|_| r.gen_range(-1.0..1.0)).collect(), y.shape())?;
    Ok(y.mul(&w)?.sum())
}

fn case(name: &str, seed: u64, inputs: Vec<Tensor>, f: CaseFn) -> Result<CaseResult> {
    let g: CaseFn = Box::new(move |x: &[Tensor]| weigh(f(x)?, seed));
    let errs = check(g, &inputs, STEP)?;
    Ok(CaseResult { name: name.into(), seed, max_rel_error: errs.into_iter().fold(0.0, f64::max) })
}

fn op_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut r = rng::stream(seed, &[rng::TAG_INIT, 77]);
    let a = signed(&mut r, &[3, 4]);
    let b = signed(&mut r, &[3, 4]);
    let pos = positive(&mut r, &[3, 4]);
    let sq = signed(&mut r, &[4, 4]);
    let tall = signed(&mut r, &[6, 4]);
    let row = signed(&mut r, &[1, 4]);
    let col = signed(&mut r, &[3, 1]);
    let vec4 = signed(&mut r, &[4]);
    let labels = vec![0usize, 3, 1];
    let mut out = Vec::new();
    macro_rules! run {
        ($name:expr, [$($x:expr),*], $f:expr) => {
            out.push(case($name, seed, vec![$($x.clone()),*], Box::new($f))?);
        };
    }
    run!("add", [a, b], |x| x[0].add(&x[1]));
    run!("sub", [a, b], |x| x[0].sub(&x[1]));
    run!("mul", [a, b], |x| x[0].mul(&x[1]));
    run!("div", [a, pos], |x| x[0].div(&x[1]));
    run!("scale", [a], |x| Ok(x[0].scale(-1.7)));
    run!("neg", [a], |x| Ok(x[0].neg()));
    run!("add_scalar", [a], |x| Ok(x[0].add_scalar(0.3).square()));
    run!("powf", [pos], |x| Ok(x[0].powf(-1.5)));
    run!("sqrt", [pos], |x| Ok(x[0].sqrt()));
    run!("square", [a], |x| Ok(x[0].square()));
    run!("exp", [a], |x| Ok(x[0].exp()));
    run!("ln", [pos], |x| Ok(x[0].ln()));
    run!("relu", [a], |x| Ok(x[0].relu()));
    run!("matmul", [a, sq], |x| x[0].matmul(&x[1]));
    run!("matmul_nt", [a, b], |x| x[0].matmul_nt(&x[1]));
    run!("matmul_tn", [a, b], |x| x[0].matmul_tn(&x[1]));
    run!("bmm", [tall, tall], |x| x[0].bmm(&x[1], 2, false, true));
    run!("bmm_tn", [tall, tall], |x| x[0].bmm(&x[1], 3, true, false));
    run!("transpose", [a], |x| x[0].transpose());
    run!("reshape", [a], |x| x[0].reshape(&[2, 6]));
    run!("expand", [row], |x| x[0].expand(&[3, 4]));
    run!("sum_to", [a], |x| x[0].sum_to(&[1, 4]));
    run!("sum", [a], |x| Ok(x[0].sum().square()));
    run!("mean", [a], |x| Ok(x[0].mean().square()));
    run!("sum_rows", [a], |x| x[0].sum_rows());
    run!("mean_rows", [a], |x| x[0].mean_rows());
    run!("sum_cols", [a], |x| x[0].sum_cols());
    run!("mean_cols", [a], |x| x[0].mean_cols());
    run!("add_bcast", [a, row], |x| x[0].add_bcast(&x[1]));
    run!("sub_bcast", [a, col], |x| x[0].sub_bcast(&x[1]));
    run!("mul_bcast", [a, col], |x| x[0].mul_bcast(&x[1]));
    run!("tile_rows", [a], |x| x[0].tile_rows(2));
    run!("fold_rows", [tall], |x| x[0].fold_rows(3));
    run!("repeat_rows", [a], |x| x[0].repeat_rows(2));
    run!("segment_sum", [tall], |x| x[0].segment_sum(2));
    run!("segment_mean", [tall], |x| x[0].segment_mean(3));
    run!("softmax_rows", [a], |x| x[0].softmax_rows());
    run!("log_softmax_rows", [a], |x| x[0].log_softmax_rows());
    run!("concat_cols", [a, col], |x| Tensor::concat_cols(&[x[0].clone(), x[1].clone()]));
    run!("slice_cols", [a], |x| x[0].slice_cols(1, 2));
    run!("pad_cols", [a], |x| x[0].pad_cols(2, 7));
    run!("layer_norm", [a, vec4, vec4], |x| x[0].layer_norm(&x[1], &x[2].add_scalar(2.0), 1e-5));
    run!("linear", [a, sq, vec4], |x| x[0].linear(&x[1], &x[2]));
    run!("l2_normalize_rows", [a], |x| x[0].l2_normalize_rows(1e-12));
    run!("mse", [a, b], |x| x[0].mse(&x[1]));
    run!("cross_entropy", [a], move |x| x[0].cross_entropy(&labels));
    run!("align_loss", [a, b], |x| align_loss(&x[0], &x[1], false));
    run!("cross_corr_loss", [a, b], |x| cross_corr_loss(&x[0], &x[1], 5e-3));
    Ok(out)
}

/// The model configuration used by the full-model check: one block,
/// `L = 4`, `d = 8`, two heads.
pub fn small_model() -> ModelConfig {
    ModelConfig { input_len: 16, patch: 4, d_model: 8, d_proj: 4, heads: 2, depth: 1, n_classes: 3, ..ModelConfig::default() }
}

/// Smallest `|pre-activation|` over every relu of one branch (depth 1).
fn relu_margin(params: &ModelParams, cfg: &ModelConfig, branch: Branch, x: &Tensor) -> Result<f64> {
    let _off = crate::tensor::no_grad();
    let enc = branch.encoder();
    let get = |n: String| params.get(&n);
    let h = embed(x, params, &enc, cfg)?;
    let attn = AttentionParams::from_params(params, &format!("{enc}.block0.attn"), cfg.heads)?;
    let (a, _) = multi_head_attention(&h, &attn, cfg.seq_len())?;
    let h1 = h.add(&a)?.layer_norm(get(format!("{enc}.block0.ln1.g"))?, get(format!("{enc}.block0.ln1.b"))?, cfg.ln_eps)?;
    let ff_pre = h1.linear(get(format!("{enc}.block0.ff.w1"))?, get(format!("{enc}.block0.ff.b1"))?)?;
    let pooled = encode_branch(params, cfg, branch, x, None)?;
    let proj = branch.projection();
    let proj_pre = pooled.linear(get(format!("{proj}.w1"))?, get(format!("{proj}.b1"))?)?;
    Ok(ff_pre.data().iter().chain(proj_pre.data()).fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

/// Central differences are meaningless across a relu kink, so the model
/// inputs are redrawn until every pre-activation clears this margin.
const KINK_MARGIN: f64 = 5e-3;
const MAX_DRAWS: u64 = 1000;

fn model_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let cfg = small_model();
    let params = init_params(&cfg, seed)?;
    let mut draw = 0;
    let windows = loop {
        let mut r = rng::stream(seed, &[rng::TAG_INIT, 78, draw]);
        let w: Vec<Vec<f64>> = (0..2).map(|_| (0..cfg.input_len).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = w.iter().map(Vec::as_slice).collect();
        draw += 1;
        let margin = relu_margin(&params, &cfg, Branch::Time, &branch_input(Branch::Time, &refs, &cfg)?)?
            .min(relu_margin(&params, &cfg, Branch::Freq, &branch_input(Branch::Freq, &refs, &cfg)?)?);
        if draw >= MAX_DRAWS || margin >= KINK_MARGIN {
            break w;
        }
    };
    let mut r = rng::stream(seed, &[rng::TAG_INIT, 79]);
    let refs: Vec<&[f64]> = windows.iter().map(Vec::as_slice).collect();
    let mut out = Vec::new();

    let h = signed(&mut r, &[2 * cfg.seq_len(), cfg.d_model]);
    let names: Vec<String> = params.names().filter(|n| n.starts_with("enc_t.block0.attn")).cloned().collect();
    let attn_inputs: Vec<Tensor> = std::iter::once(h).chain(names.iter().map(|n| params.get(n).expect("present").detach())).collect();
    let heads = cfg.heads;
    let seq = cfg.seq_len();
    let attn_names = names.clone();
    out.push(case(
        "multi_head_attention",
        seed,
        attn_inputs,
        Box::new(move |x| {
            let mut p = ModelParams::new();
            for (n, t) in attn_names.iter().zip(&x[1..]) {
                p.insert(n.replace("enc_t.block0.attn.", "a."), t.clone());
            }
            Ok(multi_head_attention(&x[0], &AttentionParams::from_params(&p, "a", heads)?, seq)?.0)
        }),
    )?);

    // every parameter of both branches through embed → block → heads
    let names: Vec<String> = params.names().cloned().collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).expect("present").detach()).collect();
    let xt = branch_input(Branch::Time, &refs, &cfg)?;
    let xf = branch_input(Branch::Freq, &refs, &cfg)?;
    let labels = vec![0usize, 2];
    out.push(case(
        "full_model",
        seed,
        inputs,
        Box::new(move |t| {
            let mut p = ModelParams::new();
            for (n, v) in names.iter().zip(t) {
                p.insert(n.clone(), v.clone());
            }
            let mut z = Vec::new();
            let mut loss = Tensor::scalar(0.0);
            for (branch, x) in [(Branch::Time, &xt), (Branch::Freq, &xf)] {
                let pooled = encode_branch(&p, &cfg, branch, x, None)?;
                z.push(project(&pooled, &p, &branch.projection())?);
                loss = loss.add(&linear_head(&pooled, &p, &branch.classifier())?.cross_entropy(&labels)?)?;
            }
            loss.add(&align_loss(&z[0], &z[1], false)?)
        }),
    )?);
    Ok(out)
}

/// Every case for seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        out.extend(op_cases(seed)?);
        out.extend(model_cases(seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_zero_passes() {
        for c in run_suite(1).unwrap() {
            assert!(c.passed(), "{} seed {}: {:e}", c.name, c.seed, c.max_rel_error);
        }
    }
}
