//! The assembled regressor: configuration, parameters, the end-to-end
//! forward pass on the tape, prediction, and checkpointing.
//!
//! Pipeline per sample: build control paths -> shared quadrature grid ->
//! router gates per channel -> bidirectional MoE-CDE encoding -> continuous
//! self attention -> pointwise cross attention -> stacked context -> CDE
//! decoder read out at the sample's own output instants.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_t, attention_weights_t, qkv_project_t, AttentionConfig, AttnVars};
use crate::crossfusion::{fuse_heads_t, stack_context_t, CrossConfig, CrossVars};
use crate::decoder::{decode_t, DecoderSpec, DecoderVars};
use crate::diffcore::{glorot_uniform, Grads, MlpSpec, ParamStore, Tape, Var};
use crate::encoder::{
    conv_pool_summary_t, encode_channel_t, route_gates_t, EncoderCtx, EncoderMasks, ExpertBank,
    Router, RouterVars, Solver,
};
use crate::error::{FameError, Result};
use crate::funcpath::{build_path, make_grid_multi_owned, ControlPath, FunctionSample, Scheme};

/// Model-level configuration: dimensions, numerics, and ablation switches.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input channel count d.
    pub d: usize,
    /// Output channel count m.
    pub m: usize,
    /// Hidden width per direction (latent is 2h).
    pub h: usize,
    /// Continuous-attention projection width.
    pub d_f: usize,
    /// Cross-attention per-head width.
    pub d_c: usize,
    /// Cross-attention heads M.
    pub heads: usize,
    /// Expert count K.
    pub experts: usize,
    /// Router summary dimension h0 (== conv channels).
    pub summary_dim: usize,
    pub conv_kernel: usize,
    pub router_resample: usize,
    /// Hidden widths shared by every MLP in the model.
    pub mlp_hidden: Vec<usize>,
    pub temperature: f64,
    pub temperature_floor: f64,
    /// Operator-norm cap for cross-attention projections.
    pub norm_cap: f64,
    /// Uniform quadrature resolution (knots are always added on top).
    pub grid_q: usize,
    pub dropout: f64,
    /// Also drop entries of the Q/K/V projection outputs during training.
    pub dropout_projections: bool,
    pub scheme: Scheme,
    pub solver: Solver,
    pub no_bidir: bool,
    pub no_moe: bool,
    pub no_crossattn: bool,
    pub decoder_per_output: bool,
}

impl ModelConfig {
    /// Defaults for `d` input and `m` output channels.
    pub fn new(d: usize, m: usize) -> Self {
        ModelConfig {
            d,
            m,
            h: 16,
            d_f: 16,
            d_c: 8,
            heads: 4,
            experts: 3,
            summary_dim: 8,
            conv_kernel: 3,
            router_resample: 32,
            mlp_hidden: vec![32, 64],
            temperature: 1.0,
            temperature_floor: 0.1,
            norm_cap: 3.0,
            grid_q: 64,
            dropout: 0.2,
            dropout_projections: false,
            scheme: Scheme::Linear,
            solver: Solver::Euler,
            no_bidir: false,
            no_moe: false,
            no_crossattn: false,
            decoder_per_output: false,
        }
    }

    pub fn effective_experts(&self) -> usize {
        if self.no_moe {
            1
        } else {
            self.experts
        }
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.h
    }

    pub fn context_dim(&self) -> usize {
        self.latent_dim() * self.d
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("m", self.m),
            ("h", self.h),
            ("d_f", self.d_f),
            ("d_c", self.d_c),
            ("heads", self.heads),
            ("experts", self.experts),
            ("summary_dim", self.summary_dim),
            ("conv_kernel", self.conv_kernel),
        ] {
            if v == 0 {
                return Err(FameError::Config(format!("{name} must be positive")));
            }
        }
        if self.grid_q < 2 {
            return Err(FameError::Config("grid_q must be >= 2".into()));
        }
        if self.router_resample < 2 {
            return Err(FameError::Config("router_resample must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FameError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Derived per-block specs, built from the config.
pub struct ModelSpecs {
    pub router: Router,
    pub bank: ExpertBank,
    pub xi: MlpSpec,
    pub attn: AttentionConfig,
    pub cross: CrossConfig,
    pub decoder: DecoderSpec,
}

/// All learnable parameters plus the configuration that shapes them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FameParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

const CHECKPOINT_FORMAT: &str = "fame-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    params: FameParams,
}

impl FameParams {
    /// Fresh parameters with seeded Glorot init and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = Self::build_specs(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        specs.router.init_into(&mut store, &mut rng)?;
        specs.xi.init_into(&mut store, "enc.xi.fwd", &mut rng)?;
        specs.bank.init_into(&mut store, "fwd", &mut rng)?;
        if !config.no_bidir {
            specs.xi.init_into(&mut store, "enc.xi.bwd", &mut rng)?;
            specs.bank.init_into(&mut store, "bwd", &mut rng)?;
        }
        specs.attn.init_into(&mut store, &mut rng)?;
        if config.no_crossattn {
            store.insert(
                "fuse.bypass.w",
                vec![config.latent_dim(), config.d_f],
                glorot_uniform(config.latent_dim(), config.d_f, &mut rng),
            )?;
        } else {
            specs.cross.init_into(&mut store, &mut rng)?;
        }
        specs.decoder.init_into(&mut store, &mut rng)?;
        Ok(FameParams { config, store })
    }

    pub fn build_specs(config: &ModelConfig) -> Result<ModelSpecs> {
        let k = config.effective_experts();
        Ok(ModelSpecs {
            router: Router::new(
                config.conv_kernel,
                config.summary_dim,
                config.router_resample,
                MlpSpec::new(config.summary_dim, config.mlp_hidden.clone(), k, config.dropout)?,
            )?,
            bank: ExpertBank::new(
                k,
                MlpSpec::new(config.h, config.mlp_hidden.clone(), 2 * config.h, config.dropout)?,
            )?,
            xi: MlpSpec::new(2, config.mlp_hidden.clone(), config.h, config.dropout)?,
            attn: AttentionConfig::new(
                config.d_f,
                config.latent_dim(),
                config.temperature,
                config.temperature_floor,
            )?,
            cross: CrossConfig::new(
                config.heads,
                config.d_c,
                config.d_f,
                config.latent_dim(),
                config.norm_cap,
            )?,
            decoder: DecoderSpec::new(
                config.m,
                config.context_dim(),
                config.mlp_hidden.clone(),
                config.dropout,
                config.decoder_per_output,
            )?,
        })
    }

    pub fn specs(&self) -> ModelSpecs {
        Self::build_specs(&self.config).expect("config validated at init")
    }

    /// Measured operator norms of the cross projections (empty under the
    /// no-crossattn ablation).
    pub fn cross_norms(&self) -> Vec<(String, f64)> {
        if self.config.no_crossattn {
            return Vec::new();
        }
        self.specs().cross.measure_norms(&self.store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(FameError::Checkpoint(format!("unexpected format '{}'", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(FameError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        let mut params = ckpt.params;
        params.store.reindex();
        params.config.validate()?;
        Ok(params)
    }
}

/// Bound tape handles for every block.
struct BoundVars {
    router: RouterVars,
    xi_fwd: Vec<(Var, Var)>,
    xi_bwd: Option<Vec<(Var, Var)>>,
    experts_fwd: Vec<Vec<(Var, Var)>>,
    experts_bwd: Option<Vec<Vec<(Var, Var)>>>,
    attn: AttnVars,
    cross: Option<CrossVars>,
    bypass: Option<Var>,
    decoder: DecoderVars,
}

fn make_bound(params: &FameParams, specs: &ModelSpecs, vars: &[Var]) -> BoundVars {
    let store = &params.store;
    let cfg = &params.config;
    BoundVars {
        router: specs.router.bind(store, vars),
        xi_fwd: specs.xi.bind(store, vars, "enc.xi.fwd"),
        xi_bwd: (!cfg.no_bidir).then(|| specs.xi.bind(store, vars, "enc.xi.bwd")),
        experts_fwd: specs.bank.bind(store, vars, "fwd"),
        experts_bwd: (!cfg.no_bidir).then(|| specs.bank.bind(store, vars, "bwd")),
        attn: specs.attn.bind(store, vars),
        cross: (!cfg.no_crossattn).then(|| specs.cross.bind(store, vars)),
        bypass: cfg.no_crossattn.then(|| vars[store.idx("fuse.bypass.w").unwrap()]),
        decoder: specs.decoder.bind(store, vars),
    }
}

/// Per-pass dropout masks, drawn once and reused across solver steps.
struct PassMasks {
    gate: Option<Vec<Rc<Vec<f64>>>>,
    encoder: EncoderMasks,
    decoder: Option<Vec<Vec<Rc<Vec<f64>>>>>,
    qkv: Option<Vec<[Rc<Vec<f64>>; 3]>>,
}

impl PassMasks {
    fn none() -> Self {
        PassMasks { gate: None, encoder: EncoderMasks::none(), decoder: None, qkv: None }
    }

    fn draw(config: &ModelConfig, specs: &ModelSpecs, n_grid: usize, rng: &mut ChaCha8Rng) -> Self {
        if config.dropout <= 0.0 {
            return Self::none();
        }
        let bank_masks = |rng: &mut ChaCha8Rng| -> Vec<Vec<Rc<Vec<f64>>>> {
            (0..specs.bank.k).map(|_| specs.bank.field.masks(rng)).collect()
        };
        let qkv = config.dropout_projections.then(|| {
            let keep = 1.0 - config.dropout;
            (0..config.d)
                .map(|_| {
                    let mut one = || {
                        // One mask per feature, tiled over the grid so the
                        // projected path keeps consistent dropped features.
                        let feat: Vec<f64> = (0..config.d_f)
                            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        Rc::new(
                            (0..n_grid).flat_map(|_| feat.iter().copied()).collect::<Vec<f64>>(),
                        )
                    };
                    [one(), one(), one()]
                })
                .collect()
        });
        PassMasks {
            gate: Some(specs.router.gate.masks(rng)),
            encoder: EncoderMasks {
                xi_fwd: Some(specs.xi.masks(rng)),
                xi_bwd: (!config.no_bidir).then(|| specs.xi.masks(rng)),
                experts_fwd: Some(bank_masks(rng)),
                experts_bwd: (!config.no_bidir).then(|| bank_masks(rng)),
            },
            decoder: Some(
                (0..if config.decoder_per_output { config.m } else { 1 })
                    .map(|_| specs.decoder.field.masks(rng))
                    .collect(),
            ),
            qkv,
        }
    }
}

/// Forward-pass products for one sample.
pub struct SampleForward {
    /// Mean squared residual over this sample's output points (present when
    /// targets were given).
    pub loss: Option<Var>,
    /// Per output channel, per query: m-dim prediction node.
    pub preds: Vec<Vec<Var>>,
    /// Router gates per input channel.
    pub gates: Vec<Vec<f64>>,
}

/// Run the full pipeline for one sample on `tape`, binding parameters as
/// fresh leaves.
///
/// `queries[z]` are channel z's normalized output instants; `targets[z]`,
/// when present, the observed values at those instants.
#[allow(clippy::too_many_arguments)]
pub fn forward_sample(
    tape: &mut Tape,
    params: &FameParams,
    specs: &ModelSpecs,
    inputs: &[FunctionSample],
    queries: &[Vec<f64>],
    targets: Option<&[Vec<f64>]>,
    training: bool,
    mask_seed: u64,
) -> Result<SampleForward> {
    let vars = params.store.bind(tape);
    forward_with_bound(tape, params, specs, &vars, inputs, queries, targets, training, mask_seed)
}

/// Loss and flat parameter gradient for one training sample.
pub fn loss_and_grad(
    params: &FameParams,
    specs: &ModelSpecs,
    inputs: &[FunctionSample],
    queries: &[Vec<f64>],
    targets: &[Vec<f64>],
    mask_seed: u64,
    training: bool,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let store_vars = params.store.bind(&mut tape);
    let fwd = forward_with_bound(
        &mut tape,
        params,
        specs,
        &store_vars,
        inputs,
        queries,
        Some(targets),
        training,
        mask_seed,
    )?;
    let loss_var = fwd.loss.expect("targets supplied");
    let loss = tape.val(loss_var)[0];
    let grads: Grads = tape.backward(loss_var)?;
    Ok((loss, params.store.flatten_grads(&store_vars, &grads)))
}

/// Forward pass against an existing leaf binding (used by training so leaf
/// gradients can be collected afterwards).
#[allow(clippy::too_many_arguments)]
pub fn forward_with_bound(
    tape: &mut Tape,
    params: &FameParams,
    specs: &ModelSpecs,
    store_vars: &[Var],
    inputs: &[FunctionSample],
    queries: &[Vec<f64>],
    targets: Option<&[Vec<f64>]>,
    training: bool,
    mask_seed: u64,
) -> Result<SampleForward> {
    let cfg = &params.config;
    if inputs.len() != cfg.d {
        return Err(FameError::Dimension {
            context: "forward input channels",
            expected: cfg.d,
            got: inputs.len(),
        });
    }
    if queries.len() != cfg.m {
        return Err(FameError::Dimension {
            context: "forward output channels",
            expected: cfg.m,
            got: queries.len(),
        });
    }
    let bound = make_bound(params, specs, store_vars);
    forward_core(tape, params, specs, &bound, inputs, queries, targets, training, mask_seed)
}

#[allow(clippy::too_many_arguments)]
fn forward_core(
    tape: &mut Tape,
    params: &FameParams,
    specs: &ModelSpecs,
    bound: &BoundVars,
    inputs: &[FunctionSample],
    queries: &[Vec<f64>],
    targets: Option<&[Vec<f64>]>,
    training: bool,
    mask_seed: u64,
) -> Result<SampleForward> {
    let cfg = &params.config;
    let paths: Vec<ControlPath> =
        inputs.iter().map(|s| build_path(s, cfg.scheme)).collect::<Result<_>>()?;
    let grid = make_grid_multi_owned(&paths, cfg.grid_q)?;
    let n = grid.len();

    let masks = if training {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        PassMasks::draw(cfg, specs, n, &mut rng)
    } else {
        PassMasks::none()
    };

    let mut gate_vars = Vec::with_capacity(cfg.d);
    let mut gate_vals = Vec::with_capacity(cfg.d);
    for path in &paths {
        let summary = conv_pool_summary_t(tape, path, &specs.router, &bound.router);
        let g = route_gates_t(tape, summary, &specs.router, &bound.router, masks.gate.as_deref());
        gate_vals.push(tape.val(g).to_vec());
        gate_vars.push(g);
    }

    let ctx = EncoderCtx {
        bank: &specs.bank,
        xi: &specs.xi,
        xi_fwd: &bound.xi_fwd,
        xi_bwd: bound.xi_bwd.as_deref(),
        experts_fwd: &bound.experts_fwd,
        experts_bwd: bound.experts_bwd.as_deref(),
        solver: cfg.solver,
    };
    let mut attended = Vec::with_capacity(cfg.d);
    for (j, path) in paths.iter().enumerate() {
        let enc = encode_channel_t(tape, &ctx, &masks.encoder, gate_vars[j], path, &grid)?;
        let zmat = match &enc.bwd {
            Some(bwd) => tape.stack_bidir(&enc.fwd, bwd, cfg.h),
            None => {
                let rev: Vec<Var> = enc.fwd.iter().rev().copied().collect();
                tape.stack_bidir(&enc.fwd, &rev, cfg.h)
            }
        };
        let (mut q, mut k, mut v) = qkv_project_t(tape, &specs.attn, &bound.attn, zmat, n);
        if let Some(qkv_masks) = &masks.qkv {
            q = tape.dropout(q, Rc::clone(&qkv_masks[j][0]));
            k = tape.dropout(k, Rc::clone(&qkv_masks[j][1]));
            v = tape.dropout(v, Rc::clone(&qkv_masks[j][2]));
        }
        let dens = attention_weights_t(tape, &specs.attn, q, k, &grid)?;
        attended.push(attend_t(tape, &specs.attn, dens, v, &grid));
    }

    let fused: Vec<Var> = match (&bound.cross, bound.bypass) {
        (Some(cross_vars), _) => fuse_heads_t(tape, &specs.cross, cross_vars, &attended, n),
        (None, Some(bypass)) => attended
            .iter()
            .map(|z| tape.matmul_nt(*z, bypass, n, cfg.d_f, cfg.latent_dim()))
            .collect(),
        _ => unreachable!("either cross attention or its bypass is bound"),
    };
    let hstack = stack_context_t(tape, &fused, cfg.latent_dim(), n);

    let out = decode_t(
        tape,
        &specs.decoder,
        &bound.decoder,
        hstack,
        &grid,
        queries,
        cfg.solver,
        masks.decoder.as_deref(),
    )?;

    let loss = match targets {
        Some(targets) => {
            let mut entries = Vec::new();
            for (z, (qs, ts)) in out.preds.iter().zip(targets).enumerate() {
                if qs.len() != ts.len() {
                    return Err(FameError::Dimension {
                        context: "forward targets",
                        expected: qs.len(),
                        got: ts.len(),
                    });
                }
                for (p, &t) in qs.iter().zip(ts) {
                    entries.push((*p, z, t));
                }
            }
            Some(tape.mse_entries(&entries))
        }
        None => None,
    };

    Ok(SampleForward { loss, preds: out.preds, gates: gate_vals })
}

impl FameParams {
    /// Evaluation-mode predictions at the queried output instants: one value
    /// vector per output channel.
    pub fn predict(&self, inputs: &[FunctionSample], queries: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let specs = self.specs();
        let mut tape = Tape::new();
        let fwd = forward_sample(&mut tape, self, &specs, inputs, queries, None, false, 0)?;
        Ok(fwd
            .preds
            .iter()
            .enumerate()
            .map(|(z, qs)| qs.iter().map(|p| tape.val(*p)[z]).collect())
            .collect())
    }

    /// Router gates per input channel (evaluation mode).
    pub fn gates(&self, inputs: &[FunctionSample]) -> Result<Vec<Vec<f64>>> {
        let specs = self.specs();
        let mut tape = Tape::new();
        let queries: Vec<Vec<f64>> = vec![vec![0.0, 1.0]; self.config.m];
        let fwd = forward_sample(&mut tape, self, &specs, inputs, &queries, None, false, 0)?;
        Ok(fwd.gates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(2, 1);
        cfg.h = 3;
        cfg.d_f = 4;
        cfg.d_c = 2;
        cfg.heads = 2;
        cfg.experts = 2;
        cfg.summary_dim = 3;
        cfg.mlp_hidden = vec![5, 6];
        cfg.grid_q = 8;
        cfg.dropout = 0.0;
        cfg
    }

    fn toy_inputs(seed: u64, d: usize) -> (Vec<FunctionSample>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let times: Vec<f64> = (0..6).map(|k| k as f64 / 5.0).collect();
        let inputs: Vec<FunctionSample> = (0..d)
            .map(|_| {
                let values: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                FunctionSample::new(times.clone(), values, 1.0).unwrap()
            })
            .collect();
        let queries = vec![vec![0.1, 0.4, 0.8]];
        let targets = vec![vec![0.3, -0.2, 0.5]];
        (inputs, queries, targets)
    }

    #[test]
    fn forward_runs_and_predicts_finite_values() {
        let params = FameParams::init(toy_config(), 7).unwrap();
        let (inputs, queries, _) = toy_inputs(1, 2);
        let preds = params.predict(&inputs, &queries).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].len(), 3);
        assert!(preds[0].iter().all(|v| v.is_finite()));

        let gates = params.gates(&inputs).unwrap();
        assert_eq!(gates.len(), 2);
        for g in &gates {
            assert_eq!(g.len(), 2);
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_and_grad_produces_full_gradient() {
        let params = FameParams::init(toy_config(), 7).unwrap();
        let specs = params.specs();
        let (inputs, queries, targets) = toy_inputs(1, 2);
        let (loss, grads) =
            loss_and_grad(&params, &specs, &inputs, &queries, &targets, 0, false).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(grads.len(), params.store.flat_len());
        let nonzero = grads.iter().filter(|g| **g != 0.0).count();
        assert!(nonzero > grads.len() / 2, "most parameters should receive gradient");
    }

    #[test]
    fn ablation_configs_build_and_run() {
        for (bidir, moe, cross) in
            [(true, false, false), (false, true, false), (false, false, true)]
        {
            let mut cfg = toy_config();
            cfg.no_bidir = bidir;
            cfg.no_moe = moe;
            cfg.no_crossattn = cross;
            let params = FameParams::init(cfg, 3).unwrap();
            let (inputs, queries, _) = toy_inputs(2, 2);
            let preds = params.predict(&inputs, &queries).unwrap();
            assert!(preds[0].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn moe_k1_bitwise_equals_single_field_encoder() {
        // A K=1 mixture must be bit-identical to bypassing the mixture and
        // running the expert directly.
        let mut cfg = toy_config();
        cfg.experts = 1;
        let params = FameParams::init(cfg, 11).unwrap();
        let specs = params.specs();
        let (inputs, _, _) = toy_inputs(3, 2);
        let path = build_path(&inputs[0], Scheme::Linear).unwrap();
        let grid = make_grid_multi_owned(&[path.clone()], 8).unwrap();

        let mut tape = Tape::new();
        let vars = params.store.bind(&mut tape);
        let xi_fwd = specs.xi.bind(&params.store, &vars, "enc.xi.fwd");
        let experts = specs.bank.bind(&params.store, &vars, "fwd");
        let dims = specs.bank.field.dims();
        let gates = tape.leaf(vec![1.0]);

        let x0 = crate::funcpath::eval_path(&path, 0.0).unwrap();
        let x0_leaf = tape.leaf(vec![x0[1], 0.0]);
        let init = tape.mlp(&xi_fwd, &specs.xi.dims(), x0_leaf, None);
        let mixed = crate::encoder::solve_cde(
            &mut tape,
            |t, z| crate::encoder::mixed_field_t(t, gates, &experts, &dims, None, z),
            init,
            &path,
            &grid,
            Solver::Euler,
        )
        .unwrap();
        let single = crate::encoder::solve_cde(
            &mut tape,
            |t, z| t.mlp(&experts[0], &dims, z, None),
            init,
            &path,
            &grid,
            Solver::Euler,
        )
        .unwrap();
        for (a, b) in mixed.iter().zip(&single) {
            assert_eq!(tape.val(*a), tape.val(*b), "K=1 mixture must be bitwise equal");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = FameParams::init(toy_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        params.save(&path).unwrap();
        let loaded = FameParams::load(&path).unwrap();
        assert_eq!(params.store.flat_len(), loaded.store.flat_len());
        for ((n1, t1), (n2, t2)) in params.store.iter().zip(loaded.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            assert_eq!(t1.data, t2.data);
        }
        let (inputs, queries, _) = toy_inputs(4, 2);
        assert_eq!(
            params.predict(&inputs, &queries).unwrap(),
            loaded.predict(&inputs, &queries).unwrap()
        );
    }

    #[test]
    fn dropout_training_is_seeded_and_eval_is_deterministic() {
        let mut cfg = toy_config();
        cfg.dropout = 0.3;
        let params = FameParams::init(cfg, 9).unwrap();
        let specs = params.specs();
        let (inputs, queries, targets) = toy_inputs(5, 2);
        let (l1, g1) =
            loss_and_grad(&params, &specs, &inputs, &queries, &targets, 42, true).unwrap();
        let (l2, g2) =
            loss_and_grad(&params, &specs, &inputs, &queries, &targets, 42, true).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        let (l3, _) =
            loss_and_grad(&params, &specs, &inputs, &queries, &targets, 43, true).unwrap();
        assert_ne!(l1, l3, "different mask seeds should perturb the loss");
    }
}
