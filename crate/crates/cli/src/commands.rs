use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use vseg::kv::KvFile;
use vseg::network::{build, checkpoint, count_parameters, NetworkVariant, NUM_CLASSES};
use vseg::optim::AdamState;
use vseg::pipeline::{self, evaluate_dice, TrainConfig};
use vseg::sampler::EpochPlan;
use vseg::volume::{
    generate_phantom, list_cases, load_case, read_label_map, save_case, write_label_map, PhantomSpec, Volume,
    CLASS_NAMES,
};

use crate::failure::{Failure, UserContext};
use crate::{EvaluateArgs, InspectArgs, PhantomArgs, PreviewArgs, SegmentArgs, TrainArgs};

type Outcome = Result<(), Failure>;

/// Metadata keys written by `train` that are not configuration.
const INFORMATIONAL: [&str; 3] = ["code_version", "data", "cases"];

fn read_config(path: Option<&Path>) -> Result<KvFile, Failure> {
    let Some(path) = path else {
        return Ok(KvFile::new());
    };
    let text = fs::read_to_string(path).user(format!("reading {}", path.display()))?;
    KvFile::parse(&text).user(format!("parsing {}", path.display()))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).user(format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).user(format!("writing {}", path.display()))
}

pub fn phantom(a: PhantomArgs) -> Outcome {
    let mut kv = read_config(a.config.as_deref())?;
    if let Some(v) = &a.size {
        kv.set("size", v);
    }
    if let Some(v) = a.seed {
        kv.set("seed", v);
    }
    if let Some(v) = a.contrast_gap {
        kv.set("contrast_gap", v);
    }
    if let Some(v) = a.noise_sigma {
        kv.set("noise_sigma", v);
    }
    if let Some(v) = a.smoothness {
        kv.set("smoothness", v);
    }
    let base = PhantomSpec::from_kv(&kv).user("phantom settings")?;
    create_dir(&a.out)?;
    for i in 0..a.count {
        let spec = PhantomSpec {
            seed: base.seed + i as u64,
            ..base.clone()
        };
        let volume = generate_phantom(&spec).user("generating phantom")?;
        let name = format!("{}{i:02}", a.name);
        save_case(&a.out, &name, &volume).user(format!("writing case {name}"))?;
        info!("wrote {name} (seed {})", spec.seed);
    }
    let mut meta = base.to_kv();
    meta.set("count", a.count);
    meta.set("name", &a.name);
    write_text(&a.out.join(format!("{}.txt", a.name)), &meta.to_string())
}

fn load_dataset(dir: &Path, only: &[String]) -> Result<Vec<(String, Volume)>, Failure> {
    let names = if only.is_empty() {
        list_cases(dir).user(format!("listing {}", dir.display()))?
    } else {
        only.to_vec()
    };
    names
        .into_iter()
        .map(|name| {
            let volume = load_case(dir, &name).user(format!("loading case {name}"))?;
            Ok((name, volume))
        })
        .collect()
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut kv = KvFile::new();
    for (k, v) in read_config(a.config.as_deref())?.entries() {
        if !INFORMATIONAL.contains(&k.as_str()) && !k.starts_with("epoch_loss.") {
            kv.set(k.clone(), v);
        }
    }
    if a.paper_scale {
        let plan = EpochPlan::full(0);
        kv.set("samples_per_class", plan.samples_per_class);
        kv.set("epochs", plan.epochs);
    }
    if let Some(v) = a.variant {
        kv.set("variant", v);
    }
    if a.with_3d {
        match kv.get("variant").map(str::parse::<NetworkVariant>) {
            Some(Ok(v)) if !v.has_volumetric() => {
                return Err(Failure::user(format!("--with-3d conflicts with variant {v}")));
            }
            _ => kv.set("variant", NetworkVariant::CombinedTriplanar3D),
        }
    }
    if let Some(v) = a.seed {
        kv.set("seed", v);
        kv.set("sampler_seed", v);
    }
    let flags = [
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("samples_per_class", a.samples_per_class.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("dropout", a.dropout.map(|v| v.to_string())),
        ("checkpoint_every", a.checkpoint_every.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    let mut config = TrainConfig::from_kv(&kv).map_err(|e| Failure::User(anyhow::Error::from(e).context("training settings")))?;
    if config.checkpoint_every > 0 {
        config.checkpoint_dir = Some(a.out.join("checkpoints"));
    }
    Ok(config)
}

pub fn train(a: TrainArgs) -> Outcome {
    let config = train_config(&a)?;
    let cases = load_dataset(&a.data, &[])?;
    let mut volumes = Vec::with_capacity(cases.len());
    for (name, volume) in &cases {
        if volume.labels().is_none() {
            return Err(Failure::user(format!("case {name} has no reference labels")));
        }
        volumes.push(volume.normalized().0);
    }
    create_dir(&a.out)?;
    if let Some(dir) = &config.checkpoint_dir {
        create_dir(dir)?;
    }
    info!("training {} on {} case(s)", config.variant, volumes.len());
    let start = Instant::now();
    let outcome = pipeline::train(&volumes, &config)?;
    info!("training took {:.1} s", start.elapsed().as_secs_f64());

    let model = a.out.join("model.vseg");
    checkpoint::save(&model, &outcome.params, Some(&outcome.optimizer)).user(format!("writing {}", model.display()))?;
    let mut meta = config.to_kv();
    meta.set("code_version", env!("CARGO_PKG_VERSION"));
    meta.set("data", a.data.display());
    meta.set("cases", cases.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(","));
    for (e, loss) in outcome.epoch_losses.iter().enumerate() {
        meta.set(format!("epoch_loss.{e}"), loss);
    }
    write_text(&a.out.join("run.txt"), &meta.to_string())?;
    println!("model: {}", model.display());
    if let Some(last) = outcome.epoch_losses.last() {
        println!("final epoch loss: {last:.6}");
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(vseg::network::ModelParams, Option<AdamState>), Failure> {
    checkpoint::load(path).user(format!("loading model {}", path.display()))
}

pub fn segment(a: SegmentArgs) -> Outcome {
    let (params, _) = load_model(&a.model)?;
    let cases = load_dataset(&a.data, &a.cases)?;
    create_dir(&a.out)?;
    for (name, volume) in cases {
        let start = Instant::now();
        let result = pipeline::segment(&volume.normalized().0, &params)?;
        let path = a.out.join(format!("{name}_seg.nii"));
        write_label_map(&result.labels, volume.dims(), volume.voxel_size(), &path).user(format!("writing {}", path.display()))?;
        info!("segmented {name} in {:.1} s", start.elapsed().as_secs_f64());
        println!("{}", path.display());
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Outcome {
    let cases = load_dataset(&a.data, &[])?;
    let mut report = KvFile::new();
    let mut sums = [0.0; NUM_CLASSES];
    let mut scored = 0;
    for (name, volume) in &cases {
        let Some(reference) = volume.labels() else {
            continue;
        };
        let path = a.seg.join(format!("{name}_seg.nii"));
        let (predicted, dims) = read_label_map(&path).user(format!("reading {}", path.display()))?;
        if dims != volume.dims() {
            return Err(Failure::user(format!("{}: dims {dims:?} differ from case {:?}", path.display(), volume.dims())));
        }
        let dice = evaluate_dice(&predicted, reference, volume.mask())?;
        println!("{name}");
        for (class, d) in CLASS_NAMES.iter().zip(dice.per_class) {
            println!("  {class:<4} {d:.4}");
            report.set(format!("dice.{name}.{class}"), d);
        }
        println!("  mean {:.4}", dice.mean());
        for (s, d) in sums.iter_mut().zip(dice.per_class) {
            *s += d;
        }
        scored += 1;
    }
    if scored == 0 {
        return Err(Failure::user(format!("no labelled cases in {}", a.data.display())));
    }
    println!("average over {scored} case(s)");
    for (class, s) in CLASS_NAMES.iter().zip(sums) {
        let mean = s / scored as f64;
        println!("  {class:<4} {mean:.4}");
        report.set(format!("dice.mean.{class}"), mean);
    }
    if let Some(out) = &a.out {
        write_text(out, &report.to_string())?;
    }
    Ok(())
}

/// Receptive fields, per-layer output extents for one training patch, and
/// parameter counts.
pub fn architecture_report(variant: NetworkVariant) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "variant: {variant}");
    let sets = if variant.shares_planar_weights() { "shared" } else { "separate" };
    let _ = writeln!(s, "in-plane weights: {sets}");
    for spec in variant.branches() {
        let rf = spec.receptive_field();
        let axes = if spec.is_volumetric() { 3 } else { 2 };
        let extent = |e: usize| vec![e.to_string(); axes].join("x");
        let _ = writeln!(s, "branch {}: receptive field {}", spec.plane.name(), extent(rf));
        let mut total = 0;
        for (l, (layer, out)) in spec.layers.iter().zip(spec.layer_extents(rf)).enumerate() {
            let params = layer.in_channels() * layer.out_channels() * layer.taps() + 3 * layer.out_channels();
            total += params;
            let _ = writeln!(
                s,
                "  layer {:>2}  dilation {:>2}  {:>2} -> {:>2}  out {:<9} params {params}",
                l + 1,
                layer.dilation(),
                layer.in_channels(),
                layer.out_channels(),
                out.map(extent).unwrap_or_else(|| "-".into()),
            );
        }
        let _ = writeln!(s, "  branch params {total}");
    }
    let width = variant.classifier_inputs();
    let _ = writeln!(s, "classifier input: {width}");
    let _ = writeln!(s, "classifier params: {}", NUM_CLASSES * width + NUM_CLASSES);
    let _ = writeln!(s, "trainable parameters: {}", count_parameters(&build(variant, 0)));
    s
}

pub fn inspect(a: InspectArgs) -> Outcome {
    print!("{}", architecture_report(a.variant));
    Ok(())
}

pub fn preview(a: PreviewArgs) -> Outcome {
    let volume = load_case(&a.data, &a.case).user(format!("loading case {}", a.case))?;
    let labels = match &a.seg {
        Some(path) => {
            let (labels, dims) = read_label_map(path).user(format!("reading {}", path.display()))?;
            if dims != volume.dims() {
                return Err(Failure::user(format!("{}: dims {dims:?} differ from case {:?}", path.display(), volume.dims())));
            }
            labels
        }
        None => volume
            .labels()
            .ok_or_else(|| Failure::user(format!("case {} has no labels; pass --seg", a.case)))?
            .to_vec(),
    };
    for path in pipeline::emit_slice_previews(&volume, &labels, &a.out)? {
        println!("{}", path.display());
    }
    Ok(())
}
