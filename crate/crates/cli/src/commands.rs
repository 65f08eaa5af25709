use std::fs;
use std::path::{Path, PathBuf};

use hdrflow::data::{synthesize_frames, FrameRecord, Manifest, SynthMode};
use hdrflow::flow::{flow_to_rgb, read_flo};
use hdrflow::gradcheck::{run_suite, GradCheckOptions, Suite};
use hdrflow::io::{read_pfm, write_pfm, write_ppm, BitDepth};
use hdrflow::metrics::evaluate;
use hdrflow::nets::HdrModel;
use hdrflow::pipeline::process_sequence;
use hdrflow::train::{overfit_tiny, TrainConfig};
use hdrflow::{ExposureSchedule, LdrFrame, RadianceFrame};

use crate::{CmdError, CmdResult, EvalArgs, Failure, FlowvizArgs, FuseArgs, GradcheckArgs, Summary, SynthArgs, TrainTinyArgs};

fn usage(msg: impl Into<String>) -> CmdError {
    Failure::Usage(msg.into()).into()
}

fn io_err(path: &Path, e: std::io::Error) -> CmdError {
    hdrflow::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn create_dir(dir: &Path) -> Result<(), CmdError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// `*.pfm` files of a directory, sorted by name.
fn pfm_files(dir: &Path) -> Result<Vec<PathBuf>, CmdError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pfm")))
        .collect();
    out.sort();
    Ok(out)
}

fn positive(name: &str, v: f64) -> Result<f64, CmdError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(usage(format!("--{name} must be a positive number, got {v}")))
    }
}

pub fn fuse(a: &FuseArgs) -> CmdResult {
    if !matches!(a.exposures, 2 | 3) {
        return Err(usage(format!("--exposures must be 2 or 3, got {}", a.exposures)));
    }
    if a.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let gamma = positive("gamma", a.gamma)? as f32;
    let white_point = a.white_point.map(|w| positive("white-point", w)).transpose()?;

    let manifest = Manifest::load(&a.input)?;
    let model = HdrModel::<f32>::load(&a.weights)?;
    let schedule: ExposureSchedule<f32> = manifest.schedule(gamma)?;
    if schedule.len() != a.exposures {
        return Err(hdrflow::Error::Format {
            path: a.input.clone(),
            msg: format!(
                "manifest cycles through {} exposures {:?}, expected {}",
                schedule.len(),
                schedule.pattern(),
                a.exposures
            ),
        }
        .into());
    }
    let frames: Vec<LdrFrame<f32>> = manifest.load_frames()?;
    create_dir(&a.out_dir)?;

    let mut s = Summary::new("fuse");
    s.path("input", &a.input);
    s.path("weights", &a.weights);
    s.put("exposures", a.exposures);
    s.put("threads", a.threads);
    s.put("frames_in", frames.len());
    let mut written = 0usize;
    let out = process_sequence(&frames, &schedule, &model, a.threads, |o| {
        let index = frames[o.index].frame_index;
        let wp = white_point.map_or(o.hdr.white_point, |w| w as f32);
        let image = o.hdr.image.map(|v| v / wp);
        if !image.is_finite() {
            return Err(hdrflow::Error::Numeric(format!("non-finite radiance in frame {index}")));
        }
        let path = a.out_dir.join(format!("hdr_{index:05}.pfm"));
        write_pfm(&RadianceFrame::new(image, 1.0)?, &path)?;
        s.row(&[
            ("frame", index.to_string()),
            ("path", path.display().to_string()),
            ("white_point", wp.to_string()),
            ("ms", format!("{:.1}", o.elapsed.as_secs_f64() * 1e3)),
        ]);
        written += 1;
        Ok(())
    });
    match out {
        Ok(out) => {
            let skipped: Vec<String> = out.skipped.iter().map(|&i| frames[i].frame_index.to_string()).collect();
            s.put("frames_out", written);
            s.put("skipped", skipped.join(","));
            Ok(s)
        }
        Err(e) => Err(CmdError {
            partial: Some(s),
            failure: Failure::Core(e),
        }),
    }
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let gamma = positive("gamma", a.gamma)?;
    let pattern = a
        .schedule
        .split(',')
        .map(|v| v.trim().parse::<f64>().ok().filter(|e| *e > 0.0 && e.is_finite()))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| usage(format!("--schedule must list positive exposures, got {:?}", a.schedule)))?;
    let depth = match a.bit_depth {
        8 => BitDepth::Eight,
        16 => BitDepth::Sixteen,
        d => return Err(usage(format!("--bit-depth must be 8 or 16, got {d}"))),
    };
    let schedule = ExposureSchedule::new(pattern, gamma).map_err(|e| usage(e.to_string()))?;
    let inputs = pfm_files(&a.hdr_dir)?;
    if inputs.is_empty() {
        return Err(hdrflow::Error::InvalidArgument(format!("no .pfm files in {}", a.hdr_dir.display())).into());
    }
    let hdr = inputs.iter().map(read_pfm::<f64>).collect::<hdrflow::Result<Vec<_>>>()?;
    let mode = match depth {
        BitDepth::Eight => SynthMode::Quantized8,
        BitDepth::Sixteen => SynthMode::Continuous,
    };
    let frames = synthesize_frames(&hdr, &schedule, a.phase, mode)?;

    let base = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(&base.join("ldr"))?;
    let base_abs = fs::canonicalize(base).map_err(|e| io_err(base, e))?;
    // relative to the manifest when the radiance files live below it
    let hdr_ref = |p: &Path| -> Result<PathBuf, CmdError> {
        let abs = fs::canonicalize(p).map_err(|e| io_err(p, e))?;
        Ok(abs.strip_prefix(&base_abs).map(Path::to_path_buf).unwrap_or(abs))
    };
    let mut records = Vec::with_capacity(frames.len());
    for (f, src) in frames.iter().zip(&inputs) {
        let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
        let rel = PathBuf::from("ldr").join(format!("{:05}_{stem}.ppm", f.frame_index));
        write_ppm(f, depth, base.join(&rel))?;
        records.push(FrameRecord {
            index: f.frame_index,
            exposure: f.exposure,
            ldr: rel,
            hdr: Some(hdr_ref(src)?),
            flows: Default::default(),
        });
    }
    let manifest = Manifest {
        records,
        base_dir: base.to_path_buf(),
    };
    manifest.save(&a.out)?;

    let mut s = Summary::new("synth");
    s.path("hdr_dir", &a.hdr_dir);
    s.put("schedule", &a.schedule);
    s.put("bit_depth", a.bit_depth);
    s.put("frames", frames.len());
    s.path("manifest", &a.out);
    Ok(s)
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let mu = positive("mu", a.mu)?;
    let preds = pfm_files(&a.pred_dir)?;
    if preds.is_empty() {
        return Err(hdrflow::Error::InvalidArgument(format!("no .pfm files in {}", a.pred_dir.display())).into());
    }
    let mut p_frames = Vec::with_capacity(preds.len());
    let mut g_frames = Vec::with_capacity(preds.len());
    let mut names = Vec::with_capacity(preds.len());
    for p in &preds {
        let name = p.file_name().expect("listed file").to_owned();
        p_frames.push(read_pfm::<f64>(p)?);
        g_frames.push(read_pfm::<f64>(a.gt_dir.join(&name))?);
        names.push(name.to_string_lossy().into_owned());
    }
    let r = evaluate(&p_frames, &g_frames, mu)?;
    let mut s = Summary::new("eval");
    s.path("pred_dir", &a.pred_dir);
    s.path("gt_dir", &a.gt_dir);
    s.put("frames", names.len());
    for (n, m) in names.iter().zip(&r.per_frame) {
        s.row(&[
            ("row", n.clone()),
            ("psnr_t", format!("{:.2}", m.psnr_t)),
            ("ssim_t", format!("{:.4}", m.ssim_t)),
        ]);
    }
    s.row(&[
        ("row", "mean".into()),
        ("psnr_t", format!("{:.2}", r.psnr_t)),
        ("ssim_t", format!("{:.4}", r.ssim_t)),
    ]);
    Ok(s)
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let suite: Suite = a.module.parse().map_err(|e: hdrflow::Error| usage(e.to_string()))?;
    if a.probes == 0 {
        return Err(usage("--probes must be at least 1"));
    }
    let opts = GradCheckOptions {
        tolerance: positive("tolerance", a.tolerance)?,
        max_probes: Some(a.probes),
        seed: a.seed,
        ..Default::default()
    };
    let reports = run_suite(suite, &opts)?;
    let mut s = Summary::new("gradcheck");
    s.put("module", &a.module);
    s.put("tolerance", a.tolerance);
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        s.row(&[
            ("check", r.name.clone()),
            ("probes", r.probes.to_string()),
            ("max_abs_err", format!("{:.3e}", r.max_abs_err)),
            ("max_rel_err", format!("{:.3e}", r.max_rel_err)),
            ("result", verdict.into()),
        ]);
    }
    s.put("checks", reports.len());
    s.put("failed", failed);
    if failed > 0 {
        return Err(CmdError {
            partial: Some(s),
            failure: Failure::Numeric(format!("{failed} gradient check(s) exceeded tolerance {}", a.tolerance)),
        });
    }
    Ok(s)
}

pub fn train_tiny(a: &TrainTinyArgs) -> CmdResult {
    let gamma = positive("gamma", a.gamma)?;
    if a.divisor == 0 {
        return Err(usage("--divisor must be at least 1"));
    }
    let config = TrainConfig {
        learning_rate: positive("lr", a.lr)?,
        max_steps: a.steps,
        seed: a.seed,
        width_divisor: a.divisor,
        ..Default::default()
    };
    let manifest = Manifest::load(&a.sample)?;
    let schedule: ExposureSchedule<f32> = manifest.schedule(gamma as f32)?;
    let center = a.center.unwrap_or(manifest.records.len() / 2);
    let sample = manifest.load_sample(center, &schedule)?;

    let mut csv = String::from("step,total,rec,ha,flow\n");
    let result = overfit_tiny(&sample, &config, |i, r| {
        csv.push_str(&format!("{i},{:e},{:e},{:e},{:e}\n", r.total, r.rec, r.ha, r.flow));
    });
    fs::write(&a.out, &csv).map_err(|e| io_err(&a.out, e))?;
    let mut s = Summary::new("train-tiny");
    s.path("sample", &a.sample);
    s.put("center", center);
    s.put("lr", a.lr);
    s.put("divisor", a.divisor);
    s.path("csv", &a.out);
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            return Err(CmdError {
                partial: Some(s),
                failure: Failure::Core(e),
            })
        }
    };
    s.put("steps", report.curve.len());
    if let (Some(first), Some(last)) = (report.curve.first(), report.curve.last()) {
        s.put("initial_loss", format!("{:e}", first.total));
        s.put("final_loss", format!("{:e}", last.total));
        s.put("reduction", format!("{:.4}", report.reduction()));
    }
    if sample.has_flow_gt() {
        s.put("flow_epe", format!("{:.4}", report.flow_epe(&sample)?));
    }
    if let Some(p) = &a.save_weights {
        report.model.save(p)?;
        s.path("weights", p);
    }
    Ok(s)
}

pub fn flowviz(a: &FlowvizArgs) -> CmdResult {
    let flow = read_flo::<f64>(&a.flo)?;
    let rgb = flow_to_rgb(&flow)?;
    write_ppm(&LdrFrame::new(rgb, 1.0, 0)?, BitDepth::Eight, &a.out)?;
    let mut s = Summary::new("flowviz");
    s.path("flo", &a.flo);
    s.path("out", &a.out);
    s.put("width", flow.width());
    s.put("height", flow.height());
    Ok(s)
}
