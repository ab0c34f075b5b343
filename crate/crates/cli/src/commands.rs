use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vetocert::adversary::{ContentPattern, TrialOutcome};
use vetocert::certify::SoundnessVerdict;
use vetocert::io::{self as pvwt, InitOptions};
use vetocert::mask::PixelRect;
use vetocert::{
    apply_patch, build_plan, greedy_attack, random_attack, AdversaryGeometry, AttackReport,
    Certifier, CertifiedOutput, Error, ImageGeometry, MaskingMode, ModelConfig, PatchPlacement,
    Tensor, VisionTransformer,
};

use crate::data::{self, Manifest};
use crate::{
    CertifyArgs, EvaluateArgs, FuzzArgs, FuzzMode, InitArgs, LabelMode, PlanArgs, ReplayArgs,
    SynthArgs,
};

/// Writes to `path`, or stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<VisionTransformer> {
    let (config, weights) =
        pvwt::load(path).with_context(|| format!("loading weights {}", path.display()))?;
    Ok(VisionTransformer::new(config, &weights)?)
}

fn certifier<'m>(
    model: &'m VisionTransformer,
    adv: AdversaryGeometry,
    batch_cap: usize,
) -> Result<Certifier<'m, f32, VisionTransformer>> {
    let plan = build_plan(model.config(), adv)?;
    Ok(Certifier::new(model, plan)?.with_batch_cap(batch_cap))
}

/// splitmix64 finaliser over `(a, b)`; derives per-image and per-run seeds
/// from the single user seed.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn plan(args: &PlanArgs) -> Result<ExitCode> {
    let geometry = ImageGeometry::new(
        args.image_width.unwrap_or(args.image_size),
        args.image_height.unwrap_or(args.image_size),
        args.patch_size,
    )?;
    let plan = build_plan(geometry, args.adv.geometry()?)?;
    if !plan.is_runnable() {
        return Err(Error::Uncertifiable(format!(
            "every mask would cover the whole {}x{} grid",
            plan.grid().0,
            plan.grid().1
        ))
        .into());
    }
    let text = if args.json {
        serde_json::to_string(&plan)? + "\n"
    } else {
        let (gw, gh) = plan.grid();
        let (nw, nh) = plan.extent();
        format!("grid {gw}x{gh}\nextent {nw}x{nh}\nk {}\n", plan.k())
    };
    emit(None, &text)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct CertifyRecord<'a> {
    id: String,
    #[serde(flatten)]
    output: &'a CertifiedOutput,
    wall_ms: f64,
}

fn file_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn certify(args: &CertifyArgs) -> Result<ExitCode> {
    let model = load_model(&args.weights)?;
    let certifier = certifier(&model, args.adv.geometry()?, args.batch_cap)?;
    let inputs = if args.input.is_dir() {
        data::list_inputs(&args.input, args.raw)?
    } else {
        vec![args.input.clone()]
    };
    let mut text = String::new();
    for path in &inputs {
        let image = data::load_image(path, model.config(), args.raw)?;
        let start = Instant::now();
        let output = certifier.certify(&image)?;
        let record = CertifyRecord {
            id: file_id(path),
            output: &output,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        text.push_str(&serde_json::to_string(&record)?);
        text.push('\n');
    }
    emit(args.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    id: &'a str,
    label: usize,
    correct: bool,
    #[serde(flatten)]
    output: &'a CertifiedOutput,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    id: &'a str,
    label: usize,
    prediction: usize,
    verified: bool,
    num_dissent: usize,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<ExitCode> {
    let model = load_model(&args.weights)?;
    let certifier = certifier(&model, args.adv.geometry()?, args.batch_cap)?;
    let manifest = Manifest::load(&args.manifest)?;
    let dataset = manifest.load_images(model.config())?;
    let evaluation = certifier.evaluate(&dataset)?;

    if let Some(path) = &args.per_sample {
        let mut text = String::new();
        for ((entry, out), (_, label)) in manifest.entries.iter().zip(&evaluation.samples).zip(&dataset) {
            let record = SampleRecord {
                id: &entry.path,
                label: *label,
                correct: out.prediction == *label,
                output: out,
            };
            text.push_str(&serde_json::to_string(&record)?);
            text.push('\n');
        }
        emit(Some(path), &text)?;
    }
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        for (entry, out) in manifest.entries.iter().zip(&evaluation.samples) {
            w.serialize(SummaryRow {
                id: &entry.path,
                label: entry.label,
                prediction: out.prediction,
                verified: out.verified,
                num_dissent: out.dissent_masks.len(),
            })?;
        }
        w.flush()?;
    }
    emit(
        args.out.as_deref(),
        &(serde_json::to_string_pretty(&evaluation.metrics)? + "\n"),
    )?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct RunOutcome {
    run: usize,
    #[serde(flatten)]
    outcome: TrialOutcome,
}

#[derive(Serialize)]
struct ImageSummary {
    id: String,
    label: usize,
    clean_prediction: usize,
    clean_verified: bool,
    attacked: bool,
    trials: usize,
    detected: usize,
    flips: usize,
    flips_detected: usize,
    violations: usize,
    counterexamples: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    outcomes: Vec<RunOutcome>,
}

#[derive(Serialize, Default)]
struct Totals {
    images: usize,
    attacked: usize,
    trials: usize,
    detected: usize,
    flips: usize,
    flips_detected: usize,
    violations: usize,
}

#[derive(Serialize)]
struct FuzzReport {
    mode: &'static str,
    seed: u64,
    trials: usize,
    steps: usize,
    adversary: [usize; 2],
    k: usize,
    masking: &'static str,
    totals: Totals,
    images: Vec<ImageSummary>,
}

/// A reproducible violation. The patch content lives next to it as raw f32.
#[derive(Serialize, Deserialize)]
struct Bundle {
    image: PathBuf,
    id: String,
    label: usize,
    adversary: [usize; 2],
    masking: String,
    mode: String,
    seed: u64,
    trial: usize,
    rect: PixelRect,
    pattern: ContentPattern,
    content_file: String,
    content_shape: [usize; 3],
    verdict: SoundnessVerdict,
}

fn masking_name(disabled: bool) -> &'static str {
    if disabled {
        "disabled"
    } else {
        "key_exclusion"
    }
}

pub fn fuzz(args: &FuzzArgs) -> Result<ExitCode> {
    let mut model = load_model(&args.weights)?;
    if args.disable_masks {
        model = model.with_masking_mode(MaskingMode::Disabled);
    }
    let adv = args.adv.geometry()?;
    let certifier = certifier(&model, adv, vetocert::certify::DEFAULT_BATCH_CAP)?;
    let manifest = Manifest::load(&args.manifest)?;
    let dataset = manifest.load_images(model.config())?;
    let donors: Vec<_> = dataset.iter().map(|(img, _)| img.clone()).collect();
    let bundle_dir = args.bundle_dir.clone().unwrap_or_else(|| {
        args.out
            .as_deref()
            .and_then(Path::parent)
            .unwrap_or(Path::new("."))
            .join("counterexamples")
    });

    let mut totals = Totals::default();
    let mut images = Vec::with_capacity(dataset.len());
    for (index, (entry, (image, label))) in manifest.entries.iter().zip(&dataset).enumerate() {
        let image_seed = mix(args.seed, index as u64);
        let clean = certifier.certify(image)?;
        let attacked = clean.verified || !args.skip_unverified;
        let runs: Vec<(u64, AttackReport)> = match (attacked, args.mode) {
            (false, _) => Vec::new(),
            (true, FuzzMode::Random) => {
                vec![(image_seed, random_attack(&certifier, image, adv, args.trials, image_seed, &donors)?)]
            }
            (true, FuzzMode::Greedy) => (0..args.trials)
                .map(|run| {
                    let seed = mix(image_seed, run as u64);
                    Ok((seed, greedy_attack(&certifier, image, adv, args.steps, seed)?))
                })
                .collect::<Result<_>>()?,
        };

        let mut summary = ImageSummary {
            id: entry.path.clone(),
            label: *label,
            clean_prediction: clean.prediction,
            clean_verified: clean.verified,
            attacked,
            trials: 0,
            detected: 0,
            flips: 0,
            flips_detected: 0,
            violations: 0,
            counterexamples: Vec::new(),
            outcomes: Vec::new(),
        };
        for (run, (seed, report)) in runs.into_iter().enumerate() {
            summary.trials += report.trials;
            summary.detected += report.detected;
            summary.flips += report.flips;
            summary.flips_detected += report.flips_detected;
            summary.violations += report.violations;
            for cx in &report.counterexamples {
                let name = format!("img{index:04}-r{run}-t{}", cx.trial);
                fs::create_dir_all(&bundle_dir)
                    .with_context(|| format!("creating {}", bundle_dir.display()))?;
                let content_file = format!("{name}.f32");
                data::write_raw(&cx.content, &bundle_dir.join(&content_file))?;
                let resolved = manifest.resolve(entry);
                let bundle = Bundle {
                    image: fs::canonicalize(&resolved).unwrap_or(resolved),
                    id: entry.path.clone(),
                    label: *label,
                    adversary: [adv.width, adv.height],
                    masking: masking_name(args.disable_masks).into(),
                    mode: format!("{:?}", args.mode).to_lowercase(),
                    seed,
                    trial: cx.trial,
                    rect: cx.rect,
                    pattern: cx.pattern,
                    content_file,
                    content_shape: [cx.rect.height, cx.rect.width, image.channels()],
                    verdict: cx.verdict,
                };
                let json_name = format!("{name}.json");
                emit(
                    Some(&bundle_dir.join(&json_name)),
                    &(serde_json::to_string_pretty(&bundle)? + "\n"),
                )?;
                summary.counterexamples.push(json_name);
            }
            if args.verbose {
                summary
                    .outcomes
                    .extend(report.outcomes.into_iter().map(|outcome| RunOutcome { run, outcome }));
            }
        }
        totals.images += 1;
        totals.attacked += attacked as usize;
        totals.trials += summary.trials;
        totals.detected += summary.detected;
        totals.flips += summary.flips;
        totals.flips_detected += summary.flips_detected;
        totals.violations += summary.violations;
        images.push(summary);
    }

    let violations = totals.violations;
    eprintln!(
        "fuzz: {} images attacked, {} trials, {} flips ({} detected), {} violations",
        totals.attacked, totals.trials, totals.flips, totals.flips_detected, violations
    );
    let report = FuzzReport {
        mode: match args.mode {
            FuzzMode::Random => "random",
            FuzzMode::Greedy => "greedy",
        },
        seed: args.seed,
        trials: args.trials,
        steps: args.steps,
        adversary: [adv.width, adv.height],
        k: certifier.plan().k(),
        masking: masking_name(args.disable_masks),
        totals,
        images,
    };
    emit(args.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    if violations > 0 {
        eprintln!("soundness violated; counterexamples in {}", bundle_dir.display());
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn replay(args: &ReplayArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&args.bundle)
        .with_context(|| format!("reading {}", args.bundle.display()))?;
    let bundle: Bundle =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.bundle.display()))?;
    let mut model = load_model(&args.weights)?;
    if bundle.masking == "disabled" {
        model = model.with_masking_mode(MaskingMode::Disabled);
    }
    let adv = AdversaryGeometry::new(bundle.adversary[0], bundle.adversary[1])?;
    let certifier = certifier(&model, adv, vetocert::certify::DEFAULT_BATCH_CAP)?;
    let clean = data::load_image(&bundle.image, model.config(), false)?;
    let content_path = args
        .bundle
        .parent()
        .unwrap_or(Path::new("."))
        .join(&bundle.content_file);
    let content = Tensor::new(bundle.content_shape.to_vec(), data::read_raw(&content_path)?)?;
    let patched = apply_patch(&clean, &PatchPlacement::new(bundle.rect.x, bundle.rect.y, content)?)?;
    let verdict = certifier.soundness_check(&clean, &patched, adv)?;
    emit(None, &(serde_json::to_string(&verdict)? + "\n"))?;
    Ok(if verdict.violation {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

pub fn init(args: &InitArgs) -> Result<ExitCode> {
    let config = ModelConfig::square(
        args.image_size,
        args.channels,
        args.patch_size,
        args.embed_dim,
        args.layers,
        args.heads,
        args.mlp_dim,
        args.classes,
    );
    config.validate()?;
    let mut options = if args.fragile {
        InitOptions::fragile()
    } else {
        InitOptions::default()
    };
    options.std = args.std.unwrap_or(options.std);
    options.patch_gain = args.patch_gain.unwrap_or(options.patch_gain);
    options.attention_gain = args.attention_gain.unwrap_or(options.attention_gain);
    options.head_gain = args.head_gain.unwrap_or(options.head_gain);
    let weights = pvwt::random_init_with(&config, args.seed, options);
    pvwt::save(&config, &weights, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let params: usize = weights.iter().map(|(_, t)| t.len()).sum();
    println!("wrote {} ({} tensors, {} parameters)", args.out.display(), weights.len(), params);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ManifestRow {
    path: String,
    label: usize,
}

pub fn synth(args: &SynthArgs) -> Result<ExitCode> {
    let model = load_model(&args.weights)?;
    let cfg = model.config();
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let images = vetocert::synth::structured_images::<f32>(
        cfg.image_width,
        cfg.image_height,
        cfg.channels,
        args.count,
        args.seed,
    );
    let manifest_path = args.out_dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest_path)
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    for (i, image) in images.iter().enumerate() {
        let name = format!("img{i:04}.png");
        let path = args.out_dir.join(&name);
        data::save_png(image, &path)?;
        let label = match args.labels {
            // label what the model sees after 8-bit quantisation
            LabelMode::Predicted => model.predict(&data::load_image(&path, cfg, false)?, None)?,
            LabelMode::Random => (mix(args.seed, i as u64) % cfg.num_classes as u64) as usize,
        };
        w.serialize(ManifestRow { path: name, label })?;
    }
    w.flush()?;
    println!("wrote {} images and {}", args.count, manifest_path.display());
    Ok(ExitCode::SUCCESS)
}
