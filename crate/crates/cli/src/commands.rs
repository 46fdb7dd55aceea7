use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use xvfi::blockmatch::BlockMatchConfig;
use xvfi::curation::{self, CurationConfig, Placement};
use xvfi::eval::{FlowSource, MetricsReport};
use xvfi::flow::{self, ApproxFlows};
use xvfi::io::{self, FrameFormat};
use xvfi::pipeline::{Interpolator, Mode, PipelineConfig};
use xvfi::{Error, ImportanceLogits, ModelConfig, Result, Tensor, WeightStore};

use crate::args::*;
use crate::manifest::{sidecar, write_file, write_json, RunManifest};

/// Parses `--t`: comma-separated decimals, or `xN` for `i/N`, `0 < i < N`.
pub fn parse_times(spec: &str) -> Result<Vec<f32>> {
    let spec = spec.trim();
    if let Some(n) = spec.strip_prefix('x') {
        let n: usize = n
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad time list {spec:?}")))?;
        if n < 2 {
            return Err(Error::InvalidArgument(format!("{spec:?} yields no intermediate times")));
        }
        return Ok((1..n).map(|i| i as f32 / n as f32).collect());
    }
    let times = spec
        .split(',')
        .map(|s| {
            let t: f32 = s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad time {s:?} in {spec:?}")))?;
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(times)
}

/// `out_t0125` for t = 0.125: the time in thousandths, four digits.
pub fn output_stem(t: f32) -> String {
    format!("out_t{:04}", (t as f64 * 1000.0).round() as u32)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn threads_setting() -> String {
    std::env::var(xvfi::parallel::THREADS_ENV).unwrap_or_else(|_| "0".into())
}

#[derive(Serialize)]
struct OutputReport {
    t: f32,
    scale: usize,
    file: PathBuf,
    height: usize,
    width: usize,
    holes: usize,
    mask_mean: f64,
}

pub fn interpolate(a: InterpolateArgs) -> Result<()> {
    let start = Instant::now();
    let times = parse_times(&a.t)?;
    let stems: Vec<String> = times.iter().map(|&t| output_stem(t)).collect();
    let mut seen = HashSet::new();
    for (stem, t) in stems.iter().zip(&times) {
        if !seen.insert(stem) {
            return Err(Error::InvalidArgument(format!("t = {t} maps to duplicate output name {stem}")));
        }
    }

    let i0 = io::read_frame(&a.frame0)?;
    let i1 = io::read_frame(&a.frame1)?;
    if i0.shape() != i1.shape() {
        return Err(Error::Shape {
            op: "interpolate",
            expected: format!("{} ({})", i0.shape(), a.frame0.display()),
            found: format!("{} ({})", i1.shape(), a.frame1.display()),
        });
    }
    let store = WeightStore::load(&a.weights)?;
    let model = store.config();
    let cfg = PipelineConfig {
        scale_factor: model.scale_factor,
        scales: a.scale_depth,
        mode: match a.mode {
            ModeArg::Inference => Mode::Inference,
            ModeArg::Training => Mode::Training,
        },
        times: times.clone(),
    };
    cfg.validate()?;
    let format = match a.format {
        FormatArg::Ppm => FrameFormat::Ppm,
        FormatArg::Pfm => FrameFormat::Pfm,
    };
    let mut manifest = RunManifest::new(
        "interpolate",
        json!({
            "frame0": a.frame0,
            "frame1": a.frame1,
            "weights": a.weights,
            "scale_factor": model.scale_factor,
            "feature_width": model.feature_width,
            "scale_depth": cfg.scales,
            "mode": cfg.mode,
            "times": times,
            "format": format.extension(),
            "threads": threads_setting(),
        }),
    );
    manifest.time("load", since(start));
    println!(
        "interpolating {}x{} at {} time(s), M={}, S={}",
        i0.width(),
        i0.height(),
        times.len(),
        model.scale_factor,
        cfg.scales
    );

    let interp = Interpolator::new(&store, cfg)?;
    let result = interp.interpolate(&i0, &i1)?;
    let t = &result.timings;
    manifest.time("feature_extraction", t.feature_extraction);
    for (s, secs) in &t.biof_i {
        manifest.time(format!("biof_i_s{s}"), *secs);
    }
    manifest.time("biof_t", t.biof_t);
    manifest.time("refinement", t.refinement);
    manifest.time("pipeline", t.total);

    let write_start = Instant::now();
    create_dir(&a.out_dir)?;
    let mut reports = Vec::with_capacity(result.outputs.len());
    for out in &result.outputs {
        let k = times.iter().position(|&x| x == out.t).expect("output time was requested");
        let stem = if out.scale == 0 {
            stems[k].clone()
        } else {
            format!("{}_s{}", stems[k], out.scale)
        };
        let file = PathBuf::from(format!("{stem}.{}", format.extension()));
        io::write_frame(a.out_dir.join(&file), &out.frame, format)?;
        manifest.outputs.push(file.clone());
        if a.dump_flows {
            for (name, f) in [("ft0", &out.ft0), ("ft1", &out.ft1)] {
                let p = PathBuf::from(format!("{stem}_{name}.flo"));
                io::write_flo(a.out_dir.join(&p), f)?;
                manifest.outputs.push(p);
            }
            let p = PathBuf::from(format!("{stem}_holes.pgm"));
            io::write_pgm(a.out_dir.join(&p), &out.holes.to_tensor().scale(255.0))?;
            manifest.outputs.push(p);
        }
        let mask = out.mask.data();
        reports.push(OutputReport {
            t: out.t,
            scale: out.scale,
            file,
            height: out.frame.height(),
            width: out.frame.width(),
            holes: out.holes.count(),
            mask_mean: mask.iter().map(|&m| m as f64).sum::<f64>() / mask.len() as f64,
        });
        println!("wrote {}", a.out_dir.join(&reports.last().expect("pushed").file).display());
    }
    if a.report {
        let path = PathBuf::from("report.json");
        write_json(
            &a.out_dir.join(&path),
            &json!({ "outputs": reports, "timings": result.timings }),
        )?;
        manifest.outputs.push(path);
    }
    manifest.time("write", since(write_start));
    manifest.time("total", since(start));
    manifest.write(&a.out_dir.join("manifest.json"))?;
    println!("done in {:.2} s", since(start));
    Ok(())
}

fn read_logits(path: Option<&PathBuf>, h: usize, w: usize) -> Result<ImportanceLogits> {
    match path {
        None => Ok(ImportanceLogits::zeros(h, w)),
        Some(p) => {
            let z = ImportanceLogits::new(io::read_pfm(p)?)?;
            if z.as_tensor().height() != h || z.as_tensor().width() != w {
                return Err(Error::Shape {
                    op: "flows",
                    expected: format!("1x{h}x{w}"),
                    found: format!("{} ({})", z.as_tensor().shape(), p.display()),
                });
            }
            Ok(z)
        }
    }
}

pub fn flows(a: FlowsArgs) -> Result<()> {
    let start = Instant::now();
    let f01 = io::read_flo(&a.f01)?;
    let f10 = io::read_flo(&a.f10)?;
    if f01.as_tensor().shape() != f10.as_tensor().shape() {
        return Err(Error::Shape {
            op: "flows",
            expected: format!("{} ({})", f01.as_tensor().shape(), a.f01.display()),
            found: format!("{} ({})", f10.as_tensor().shape(), a.f10.display()),
        });
    }
    let (h, w) = (f01.height(), f01.width());
    let z01 = read_logits(a.z01.as_ref(), h, w)?;
    let z10 = read_logits(a.z10.as_ref(), h, w)?;
    let (ft0, ft1, holes0, holes1) = match a.method {
        FlowMethod::Linear => {
            let (t0, t1) = flow::linear_approx(&f01, &f10, a.t)?;
            (t0, t1, 0, 0)
        }
        FlowMethod::Cfr | FlowMethod::Reversal => {
            let ApproxFlows {
                t0,
                t1,
                holes_t0,
                holes_t1,
            } = if matches!(a.method, FlowMethod::Cfr) {
                flow::cfr(&f01, &f10, &z01, &z10, a.t)?
            } else {
                flow::flow_reversal(&f01, &f10, &z01, &z10, a.t)?
            };
            (t0, t1, holes_t0.count(), holes_t1.count())
        }
    };
    create_dir(&a.out)?;
    io::write_flo(a.out.join("ft0.flo"), &ft0)?;
    io::write_flo(a.out.join("ft1.flo"), &ft1)?;
    let method = match a.method {
        FlowMethod::Cfr => "cfr",
        FlowMethod::Reversal => "reversal",
        FlowMethod::Linear => "linear",
    };
    let mut manifest = RunManifest::new(
        "flows",
        json!({
            "f01": a.f01,
            "f10": a.f10,
            "z01": a.z01,
            "z10": a.z10,
            "t": a.t,
            "method": method,
        }),
    );
    manifest.outputs = vec!["ft0.flo".into(), "ft1.flo".into()];
    manifest.time("total", since(start));
    manifest.write(&a.out.join("manifest.json"))?;
    println!("holes t0={holes0} t1={holes1}");
    Ok(())
}

fn read_frames(paths: &[PathBuf]) -> Result<Vec<Tensor>> {
    paths.iter().map(io::read_frame).collect()
}

pub fn metrics(a: MetricsArgs) -> Result<()> {
    let start = Instant::now();
    if a.gt.len() != a.pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth frames vs {} predicted frames",
            a.gt.len(),
            a.pred.len()
        )));
    }
    let gt = read_frames(&a.gt)?;
    let pred = read_frames(&a.pred)?;
    let source = match &a.flows {
        None => FlowSource::BlockMatcher(BlockMatchConfig::default()),
        Some(paths) => FlowSource::External(paths.iter().map(io::read_flo).collect::<Result<_>>()?),
    };
    let report = MetricsReport::compute(&gt, &pred, &source)?.rounded();
    write_json(&a.out, &report)?;
    let mut manifest = RunManifest::new(
        "metrics",
        json!({ "gt": a.gt, "pred": a.pred, "flows": a.flows, "estimator": source.name() }),
    );
    manifest.outputs.push(a.out.clone());
    manifest.time("total", since(start));
    manifest.write(&sidecar(&a.out))?;
    println!("psnr {} ssim {}", report.psnr, report.ssim);
    Ok(())
}

pub fn curate(a: CurateArgs) -> Result<()> {
    let start = Instant::now();
    let (columns, rows) = match a.stride {
        Some(s) => (Placement::Stride(s), Placement::Stride(s)),
        None => (Placement::Count(a.columns), Placement::Count(a.rows)),
    };
    let cfg = CurationConfig {
        patch: a.patch,
        columns,
        rows,
        clip_len: a.clip_len,
        temporal: Placement::Stride(a.temporal_stride),
        top_fraction: a.top,
        allow_overlap: a.allow_overlap,
    };
    cfg.validate()?;
    let scenes = curation::load_scenes(&a.manifest)?;
    let scored: Vec<Vec<_>> = scenes
        .par_iter()
        .map(|s| curation::score_clips(s, &cfg))
        .collect::<Result<_>>()?;
    let records: Vec<_> = scored.into_iter().flatten().collect();
    let kept = curation::select_top(&records, &cfg)?;
    write_json(&a.out, &kept)?;
    let mut manifest = RunManifest::new(
        "curate",
        json!({
            "manifest": a.manifest,
            "patch": a.patch,
            "columns": format!("{columns:?}"),
            "rows": format!("{rows:?}"),
            "clip_len": a.clip_len,
            "temporal_stride": a.temporal_stride,
            "top": a.top,
            "allow_overlap": a.allow_overlap,
        }),
    );
    manifest.outputs.push(a.out.clone());
    manifest.time("total", since(start));
    manifest.write(&sidecar(&a.out))?;
    println!(
        "scored {} candidate clips in {} scene(s), kept {}",
        records.len(),
        scenes.len(),
        kept.len()
    );
    Ok(())
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let start = Instant::now();
    let scenes = curation::load_scenes(&a.manifest)?;
    let stats = curation::dataset_stats(&scenes)?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let table = stats.table(&name);
    write_file(&a.out, table.as_bytes())?;
    let mut manifest = RunManifest::new("stats", json!({ "manifest": a.manifest, "name": name }));
    manifest.outputs.push(a.out.clone());
    manifest.time("total", since(start));
    manifest.write(&sidecar(&a.out))?;
    print!("{table}");
    Ok(())
}

pub fn init_weights(a: InitWeightsArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = ModelConfig::new(a.scale_factor, a.width)?;
    let mut store = WeightStore::xavier(cfg, a.seed)?;
    if a.zero_heads {
        store = store.with_zeroed_heads();
    }
    store.save(&a.out)?;
    let mut manifest = RunManifest::new(
        "init-weights",
        json!({
            "seed": a.seed,
            "scale_factor": a.scale_factor,
            "feature_width": a.width,
            "zero_heads": a.zero_heads,
        }),
    );
    manifest.outputs.push(a.out.clone());
    manifest.time("total", since(start));
    manifest.write(&sidecar(&a.out))?;
    println!("wrote {} ({} parameters)", a.out.display(), store.param_count());
    Ok(())
}

pub fn inspect_weights(a: InspectWeightsArgs) -> Result<()> {
    let store = WeightStore::load(&a.input)?;
    let cfg = store.config();
    println!("scale factor M={} feature width {}", cfg.scale_factor, cfg.feature_width);
    for name in store.names() {
        let p = store.get(name)?;
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        println!("{name}\t{}", dims.join("x"));
    }
    println!("total parameters: {}", store.param_count());
    Ok(())
}
