//! The standard set of finite-difference checks over every backward rule,
//! grouped the way the command line selects them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::align::AlignFuse;
use crate::backbone::{Backbone, BackboneConfig};
use crate::boxes::BBox;
use crate::detector::{build_targets, detection_loss, Head};
use crate::error::{Error, Result};
use crate::eval::GroundTruthBox;
use crate::fpn::{Pyramid, PyramidConfig};
use crate::gradcheck::{finite_diff_check, CheckInput, CheckOptions, GradReport};
use crate::msfem::{AdaptiveConv, Msfem, MsfemConfig};
use crate::nn::{Activation, AdaptiveGeometry, ConvSpec, DeformSpec, PoolMode, UpsampleMode};
use crate::params::{seeded_rng, ModuleParams, ParamInit};
use crate::slpa::{Slpa, SlpaConfig};
use crate::tape::{Mode, Tape, ValueId};
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CheckGroup {
    Tensor,
    Slpa,
    Msfem,
    Deform,
    Fpn,
}

impl CheckGroup {
    pub const ALL: [CheckGroup; 5] = [
        CheckGroup::Tensor,
        CheckGroup::Slpa,
        CheckGroup::Msfem,
        CheckGroup::Deform,
        CheckGroup::Fpn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckGroup::Tensor => "tensor",
            CheckGroup::Slpa => "slpa",
            CheckGroup::Msfem => "msfem",
            CheckGroup::Deform => "deform",
            CheckGroup::Fpn => "fpn",
        }
    }

    /// `all` selects every group.
    pub fn parse_selection(s: &str) -> Result<Vec<CheckGroup>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .map(|g| vec![g])
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown check group `{s}` (expected all, tensor, slpa, msfem, deform or fpn)"
                ))
            })
    }
}

type CheckFn = fn(&CheckOptions) -> Result<GradReport>;

/// Every check with its group, in execution order.
pub fn catalogue() -> Vec<(CheckGroup, &'static str, CheckFn)> {
    use CheckGroup::*;
    vec![
        (Tensor, "elementwise_broadcast", check_elementwise as CheckFn),
        (Tensor, "concat_slice_reshape", check_layout),
        (Tensor, "conv2d", check_conv2d),
        (Tensor, "conv2d_strided_grouped", check_conv2d_strided),
        (Tensor, "pool_channel_max", |o| check_pool(o, PoolMode::Max)),
        (Tensor, "pool_channel_avg", |o| check_pool(o, PoolMode::Avg)),
        (Tensor, "global_avg_pool", check_global_pool),
        (Tensor, "batch_norm_train", |o| check_batch_norm(o, Mode::Train)),
        (Tensor, "batch_norm_eval", |o| check_batch_norm(o, Mode::Eval)),
        (Tensor, "relu", |o| check_activation(o, Activation::Relu)),
        (Tensor, "leaky_relu", |o| check_activation(o, Activation::LeakyRelu)),
        (Tensor, "sigmoid", |o| check_activation(o, Activation::Sigmoid)),
        (Tensor, "softmax_channels", check_softmax),
        (Tensor, "upsample_nearest", |o| check_upsample(o, UpsampleMode::Nearest)),
        (Tensor, "upsample_bilinear", |o| {
            check_upsample(o, UpsampleMode::Bilinear)
        }),
        (Tensor, "unfold_dilated", check_unfold),
        (Slpa, "slpa_forward", check_slpa),
        (Msfem, "adaptive_kernel_predict", check_kernel_predict),
        (Msfem, "adaptive_conv_apply", check_adaptive_apply),
        (Msfem, "msfem_forward", check_msfem),
        (Deform, "deform_conv2d", check_deform),
        (Deform, "align_fuse", check_align),
        (Fpn, "build_pyramid_plain", |o| check_pyramid(o, false)),
        (Fpn, "build_pyramid_full", |o| check_pyramid(o, true)),
        (Fpn, "head_forward", check_head),
        (Fpn, "detection_loss", check_loss),
        (Fpn, "backbone_end_to_end", check_backbone),
    ]
}

/// Runs the checks of `groups` in catalogue order.
pub fn run_suite(groups: &[CheckGroup], opts: &CheckOptions) -> Result<Vec<GradReport>> {
    catalogue()
        .into_iter()
        .filter(|(g, _, _)| groups.contains(g))
        .map(|(_, _, check)| check(opts))
        .collect()
}

fn rng_for(opts: &CheckOptions, salt: u64) -> ChaCha8Rng {
    seeded_rng(opts.seed.wrapping_mul(0x9E37_79B9).wrapping_add(salt))
}

fn random(rng: &mut ChaCha8Rng, dims: Dims, lo: f64, hi: f64) -> Tensor4<f64> {
    let data = (0..dims.len()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor4::from_vec(dims, data).expect("length matches dims")
}

/// Values `k + 0.3 +- 0.05` for integers `k` in `-2..=1`. Bilinear sampling
/// kinks where a sample crosses the integer grid, so offsets kept this far
/// from it make every probe see a smooth function.
fn off_grid(rng: &mut ChaCha8Rng, dims: Dims) -> Tensor4<f64> {
    let data = (0..dims.len())
        .map(|_| rng.random_range(-2..=1) as f64 + 0.3 + rng.random_range(-0.05..0.05))
        .collect();
    Tensor4::from_vec(dims, data).expect("length matches dims")
}

fn d(n: usize, c: usize, h: usize, w: usize) -> Dims {
    Dims::new(n, c, h, w)
}

/// Declared parameters with learnable entries redrawn at random (gains near
/// one, everything else near zero) so zero-initialised layers still carry
/// gradient. Running statistics stay fixed.
fn module_inputs(params: &ModuleParams<f64>, rng: &mut ChaCha8Rng) -> Vec<CheckInput> {
    params
        .entries()
        .iter()
        .map(|e| {
            if !e.learnable {
                return CheckInput::fixed(&e.name, e.tensor.clone());
            }
            let dims = e.tensor.dims();
            let t = if e.name.ends_with(".gamma") {
                random(rng, dims, 0.5, 1.5)
            } else if e.name.ends_with("offset.bias") {
                off_grid(rng, dims)
            } else if e.name.ends_with("offset.weight") {
                // small enough that predicted offsets stay near their biases
                random(rng, dims, -0.002, 0.002)
            } else {
                random(rng, dims, -0.5, 0.5)
            };
            CheckInput::probe(&e.name, t)
        })
        .collect()
}

fn declared(declare: impl FnOnce(&mut ParamInit<'_, f64>) -> Result<()>) -> Result<ModuleParams<f64>> {
    let mut params = ModuleParams::new();
    let mut rng = seeded_rng(0);
    declare(&mut ParamInit::new(&mut params, &mut rng))?;
    Ok(params)
}

/// Flattens outputs of differing shapes into one `(1, total, 1, 1)` value.
fn flatten_all(tape: &mut Tape<f64>, values: &[ValueId]) -> Result<ValueId> {
    let flat = values
        .iter()
        .map(|&v| {
            let len = tape.dims(v)?.len();
            tape.reshape(v, d(1, len, 1, 1))
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_channels(&flat)
}

/// Runs a module check: parameters first, then the extra inputs.
fn module_check(
    name: &str,
    opts: &CheckOptions,
    params: &ModuleParams<f64>,
    rng: &mut ChaCha8Rng,
    extra: Vec<CheckInput>,
    f: impl Fn(&mut Tape<f64>, &crate::params::Bound, &[ValueId]) -> Result<ValueId>,
) -> Result<GradReport> {
    let np = params.len();
    let mut inputs = module_inputs(params, rng);
    inputs.extend(extra);
    finite_diff_check(
        name,
        &inputs,
        |tape, ids| {
            let bound = params.bind_ids(ids[..np].to_vec())?;
            f(tape, &bound, &ids[np..])
        },
        opts,
    )
}

fn check_elementwise(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 1);
    let inputs = [
        CheckInput::probe("a", random(&mut rng, d(2, 3, 4, 4), -1.0, 1.0)),
        CheckInput::probe("channel", random(&mut rng, d(2, 1, 4, 4), -1.0, 1.0)),
        CheckInput::probe("spatial", random(&mut rng, d(2, 3, 1, 1), -1.0, 1.0)),
    ];
    finite_diff_check(
        "elementwise_broadcast",
        &inputs,
        |t, ids| {
            let m = t.mul(ids[0], ids[1])?;
            let s = t.add(m, ids[2])?;
            let sq = t.mul(s, ids[0])?;
            t.scale(sq, -0.7)
        },
        opts,
    )
}

fn check_layout(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 2);
    let inputs = [
        CheckInput::probe("a", random(&mut rng, d(2, 3, 4, 4), -1.0, 1.0)),
        CheckInput::probe("b", random(&mut rng, d(2, 2, 4, 4), -1.0, 1.0)),
    ];
    finite_diff_check(
        "concat_slice_reshape",
        &inputs,
        |t, ids| {
            let cat = t.concat_channels(&[ids[0], ids[1]])?;
            let mid = t.slice_channels(cat, 1, 3)?;
            let r = t.reshape(mid, d(2, 6, 2, 4))?;
            let sq = t.mul(r, r)?;
            let total = t.sum(sq)?;
            let shifted = t.add(sq, r)?;
            flatten_all(t, &[shifted, total])
        },
        opts,
    )
}

fn conv_check(name: &str, opts: &CheckOptions, spec: ConvSpec, input: Dims, salt: u64) -> Result<GradReport> {
    let mut rng = rng_for(opts, salt);
    let mut inputs = vec![
        CheckInput::probe("x", random(&mut rng, input, -1.0, 1.0)),
        CheckInput::probe("weight", random(&mut rng, spec.weight_dims(), -0.5, 0.5)),
    ];
    if spec.bias {
        inputs.push(CheckInput::probe("bias", random(&mut rng, spec.bias_dims(), -0.5, 0.5)));
    }
    finite_diff_check(
        name,
        &inputs,
        |t, ids| t.conv2d(ids[0], ids[1], ids.get(2).copied(), &spec),
        opts,
    )
}

fn check_conv2d(opts: &CheckOptions) -> Result<GradReport> {
    conv_check("conv2d", opts, ConvSpec::same(3, 4, 3, 1), d(2, 3, 6, 6), 3)
}

fn check_conv2d_strided(opts: &CheckOptions) -> Result<GradReport> {
    let spec = ConvSpec::same(4, 6, 3, 2).with_stride(2).with_groups(2);
    conv_check("conv2d_strided_grouped", opts, spec, d(2, 4, 7, 7), 4)
}

fn check_pool(opts: &CheckOptions, mode: PoolMode) -> Result<GradReport> {
    let mut rng = rng_for(opts, 5);
    let name = match mode {
        PoolMode::Max => "pool_channel_max",
        PoolMode::Avg => "pool_channel_avg",
    };
    let inputs = [CheckInput::probe("x", random(&mut rng, d(2, 5, 4, 4), -1.0, 1.0))];
    finite_diff_check(name, &inputs, |t, ids| t.pool_channel(ids[0], mode), opts)
}

fn check_global_pool(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 6);
    let inputs = [CheckInput::probe("x", random(&mut rng, d(2, 3, 5, 4), -1.0, 1.0))];
    finite_diff_check("global_avg_pool", &inputs, |t, ids| t.adaptive_avg_pool(ids[0]), opts)
}

fn check_batch_norm(opts: &CheckOptions, mode: Mode) -> Result<GradReport> {
    let mut rng = rng_for(opts, 7);
    let c = 3;
    let inputs = [
        CheckInput::probe("x", random(&mut rng, d(2, c, 4, 4), -1.0, 2.0)),
        CheckInput::probe("gamma", random(&mut rng, d(1, c, 1, 1), 0.5, 1.5)),
        CheckInput::probe("beta", random(&mut rng, d(1, c, 1, 1), -0.5, 0.5)),
        CheckInput::fixed("running_mean", random(&mut rng, d(1, c, 1, 1), -0.2, 0.2)),
        CheckInput::fixed("running_var", random(&mut rng, d(1, c, 1, 1), 0.5, 1.5)),
    ];
    let name = match mode {
        Mode::Train => "batch_norm_train",
        Mode::Eval => "batch_norm_eval",
    };
    let o = CheckOptions { mode, ..*opts };
    finite_diff_check(
        name,
        &inputs,
        |t, ids| t.batch_norm(ids[0], ids[1], ids[2], ids[3], ids[4]),
        &o,
    )
}

fn check_activation(opts: &CheckOptions, kind: Activation) -> Result<GradReport> {
    let mut rng = rng_for(opts, 8);
    let name = match kind {
        Activation::Relu => "relu",
        Activation::LeakyRelu => "leaky_relu",
        Activation::Sigmoid => "sigmoid",
    };
    let inputs = [CheckInput::probe("x", random(&mut rng, d(2, 3, 4, 4), -2.0, 2.0))];
    finite_diff_check(name, &inputs, |t, ids| t.activation(ids[0], kind), opts)
}

fn check_softmax(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 9);
    let inputs = [CheckInput::probe("x", random(&mut rng, d(2, 9, 3, 3), -2.0, 2.0))];
    finite_diff_check("softmax_channels", &inputs, |t, ids| t.softmax_channels(ids[0]), opts)
}

fn check_upsample(opts: &CheckOptions, mode: UpsampleMode) -> Result<GradReport> {
    let mut rng = rng_for(opts, 10);
    let name = match mode {
        UpsampleMode::Nearest => "upsample_nearest",
        UpsampleMode::Bilinear => "upsample_bilinear",
    };
    let inputs = [CheckInput::probe("x", random(&mut rng, d(2, 2, 3, 4), -1.0, 1.0))];
    finite_diff_check(name, &inputs, |t, ids| t.upsample(ids[0], 7, 8, mode), opts)
}

fn check_unfold(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 11);
    let inputs = [CheckInput::probe("x", random(&mut rng, d(2, 2, 5, 5), -1.0, 1.0))];
    finite_diff_check("unfold_dilated", &inputs, |t, ids| t.unfold_dilated(ids[0], 3, 2), opts)
}

fn check_slpa(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 12);
    let slpa = Slpa::new("slpa", &SlpaConfig::default())?;
    let params = declared(|init| slpa.declare(init))?;
    let x = CheckInput::probe("x", random(&mut rng, d(2, 4, 8, 8), -1.0, 1.0));
    module_check("slpa_forward", opts, &params, &mut rng, vec![x], |t, b, ids| {
        Ok(slpa.forward(t, b, ids[0])?.features)
    })
}

fn check_kernel_predict(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 13);
    let branch = AdaptiveConv::new("adaptive", 4, 2, 2)?;
    let params = declared(|init| branch.declare(init))?;
    let x = CheckInput::probe("x", random(&mut rng, d(2, 4, 6, 6), -1.0, 1.0));
    module_check(
        "adaptive_kernel_predict",
        opts,
        &params,
        &mut rng,
        vec![x],
        |t, b, ids| branch.predict_kernels(t, b, ids[0]),
    )
}

fn check_adaptive_apply(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 14);
    let geo = AdaptiveGeometry {
        kernel: 3,
        dilation: 2,
        groups: 2,
    };
    let x = random(&mut rng, d(2, 4, 6, 6), -1.0, 1.0);
    let k = random(&mut rng, geo.kernel_dims(x.dims()), -1.0, 1.0);
    let inputs = [CheckInput::probe("x", x), CheckInput::probe("kernels", k)];
    finite_diff_check(
        "adaptive_conv_apply",
        &inputs,
        |t, ids| t.adaptive_conv_apply(ids[0], ids[1], geo),
        opts,
    )
}

fn check_msfem(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 15);
    let msfem = Msfem::new("msfem", &MsfemConfig::new(8, 4))?;
    let params = declared(|init| msfem.declare(init))?;
    let x = CheckInput::probe("x", random(&mut rng, d(2, 8, 5, 5), -1.0, 1.0));
    module_check("msfem_forward", opts, &params, &mut rng, vec![x], |t, b, ids| {
        msfem.forward(t, b, ids[0])
    })
}

fn check_deform(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 16);
    let spec = DeformSpec::same(3, 4, 3, 1);
    let xd = d(2, 3, 6, 6);
    let inputs = [
        CheckInput::probe("x", random(&mut rng, xd, -1.0, 1.0)),
        CheckInput::probe("offsets", off_grid(&mut rng, spec.offset_dims(xd)?)),
        CheckInput::probe("weight", random(&mut rng, spec.weight_dims(), -0.5, 0.5)),
        CheckInput::probe("bias", random(&mut rng, spec.bias_dims(), -0.5, 0.5)),
    ];
    finite_diff_check(
        "deform_conv2d",
        &inputs,
        |t, ids| t.deform_conv2d(ids[0], ids[1], ids[2], Some(ids[3]), &spec),
        opts,
    )
}

fn check_align(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 17);
    let fuse = AlignFuse::new("fuse", 3, true, UpsampleMode::Nearest);
    let params = declared(|init| fuse.declare(init))?;
    let extra = vec![
        CheckInput::probe("top", random(&mut rng, d(2, 3, 3, 3), -1.0, 1.0)),
        CheckInput::probe("lateral", random(&mut rng, d(2, 3, 6, 6), -1.0, 1.0)),
    ];
    module_check("align_fuse", opts, &params, &mut rng, extra, |t, b, ids| {
        fuse.forward(t, b, ids[0], ids[1])
    })
}

fn check_pyramid(opts: &CheckOptions, full: bool) -> Result<GradReport> {
    let mut rng = rng_for(opts, 18 + full as u64);
    // A 1x1 top upsamples to a constant plane whose offset gradients are
    // exactly zero, which the relative error cannot resolve, so the full
    // pyramid starts from 2x2 and uses a batch of two for its batch norms.
    let (batch, base, c2) = if full { (2, 16, 2) } else { (1, 8, 4) };
    let widths = vec![c2, 4, 8, 8];
    let cfg = PyramidConfig {
        use_msfem: full,
        use_align: full,
        upsample: if full {
            UpsampleMode::Bilinear
        } else {
            UpsampleMode::Nearest
        },
        ..PyramidConfig::new(widths.clone(), 4)
    };
    let pyramid = Pyramid::new("fpn", &cfg)?;
    let params = declared(|init| pyramid.declare(init))?;
    let extra = widths
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let s = base >> i;
            CheckInput::probe(format!("c{}", i + 2), random(&mut rng, d(batch, c, s, s), -1.0, 1.0))
        })
        .collect();
    let name = if full {
        "build_pyramid_full"
    } else {
        "build_pyramid_plain"
    };
    module_check(name, opts, &params, &mut rng, extra, |t, b, ids| {
        let levels = pyramid.forward(t, b, ids)?;
        flatten_all(t, &levels)
    })
}

fn pyramid_inputs(rng: &mut ChaCha8Rng, width: usize) -> Vec<CheckInput> {
    [8, 4, 2, 1]
        .iter()
        .enumerate()
        .map(|(i, &s)| CheckInput::probe(format!("p{}", i + 2), random(rng, d(1, width, s, s), -1.0, 1.0)))
        .collect()
}

fn check_head(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 20);
    let head = Head::new("head", 4, 3)?;
    let params = declared(|init| head.declare(init))?;
    let extra = pyramid_inputs(&mut rng, 4);
    module_check("head_forward", opts, &params, &mut rng, extra, |t, b, ids| {
        let outs = head.forward(t, b, ids)?;
        let all: Vec<ValueId> = outs.iter().flat_map(|o| [o.class_logits, o.box_deltas]).collect();
        flatten_all(t, &all)
    })
}

fn check_loss(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 21);
    let classes = 3;
    let sizes = [(8, 8), (4, 4), (2, 2), (1, 1)];
    let mut inputs = Vec::new();
    for (i, &(h, w)) in sizes.iter().enumerate() {
        inputs.push(CheckInput::probe(
            format!("cls{i}"),
            random(&mut rng, d(2, classes, h, w), -2.0, 2.0),
        ));
        inputs.push(CheckInput::probe(
            format!("box{i}"),
            random(&mut rng, d(2, 4, h, w), -1.0, 1.0),
        ));
    }
    let gt = |image_id, x, y, w, h, class_id| GroundTruthBox {
        image_id,
        bbox: BBox::new(x, y, w, h),
        class_id,
    };
    let gts = vec![
        vec![gt(0, 3.0, 4.0, 9.0, 7.0, 0), gt(0, 14.0, 12.0, 12.0, 15.0, 2)],
        vec![gt(1, 2.0, 2.0, 26.0, 20.0, 1)],
    ];
    let targets = build_targets(&gts, &sizes, classes)?;
    finite_diff_check(
        "detection_loss",
        &inputs,
        |t, ids| {
            let outs: Vec<_> = ids
                .chunks(2)
                .map(|p| crate::detector::LevelOutput {
                    class_logits: p[0],
                    box_deltas: p[1],
                })
                .collect();
            Ok(detection_loss(t, &outs, targets.clone())?.0)
        },
        opts,
    )
}

fn check_backbone(opts: &CheckOptions) -> Result<GradReport> {
    let mut rng = rng_for(opts, 22);
    let cfg = BackboneConfig {
        use_slpa: true,
        ..BackboneConfig::toy([4, 4, 8, 8])
    };
    let backbone = Backbone::new("backbone", &cfg)?;
    let params = declared(|init| backbone.declare(init))?;
    let x = CheckInput::probe("image", random(&mut rng, d(1, 3, 32, 32), 0.0, 1.0));
    module_check("backbone_end_to_end", opts, &params, &mut rng, vec![x], |t, b, ids| {
        let feats = backbone.forward(t, b, ids[0])?;
        t.sum(feats[3])
    })
}
