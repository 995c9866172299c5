use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use st_guidance::dataset::{self, GenerateOptions, GenParams, PromptTemplates, ShardMode, SplitSpec, TaskKind};
use st_guidance::geometry::{self, CameraIntrinsics, Pixel, Point3, RigidTransform};
use st_guidance::guidance::{self, AugmentMode, AugmentParams, GuidancePackage, InstanceMask};
use st_guidance::metrics::{self, DepthPair, EvalOptions, MetricReport, ScorerRegistry};
use st_guidance::raster::{self, FloatRaster};
use st_guidance::sim::{self, ExecPlanner, ExecPolicy, MockPlanner, MockPolicy, Planner, Policy, Scenario, SimError};
use st_guidance::trajectory::{self, CanonicalTrajectory, DepthAnchor, ExtractParams, Track2D, WeightProfile};
use st_guidance::ExecMode;

use crate::config::Config;
use crate::error::CliError;
use crate::{AugmentArgs, EvalArgs, EvalKind, ExtractArgs, GenDatasetArgs, LiftArgs, Mode, SimulateArgs, Weights};

fn require_files(paths: &[&Path]) -> Result<(), CliError> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::input(format!("{}: no such file", p.display())));
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    }
    let mut text = serde_json::to_string_pretty(v).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn units_per_meter(flag: Option<f64>, cfg: &Config) -> Result<f64, CliError> {
    let u = cfg.or(flag, "units_per_meter")?.unwrap_or(dataset::DEPTH_UNITS_PER_METER);
    if u > 0.0 && u.is_finite() {
        Ok(u)
    } else {
        Err(CliError::input(format!("units per meter must be positive, got {u}")))
    }
}

// ---------------------------------------------------------------------------

pub fn extract(a: &ExtractArgs, cfg: &Config) -> Result<(), CliError> {
    require_files(&[&a.track, &a.depth, &a.intrinsics])?;
    if a.k != trajectory::CANONICAL_LEN && !a.allow_nonstandard {
        return Err(CliError::input(format!(
            "--k {} differs from {}; pass --allow-nonstandard to accept it",
            a.k,
            trajectory::CANONICAL_LEN
        )));
    }
    let upm = units_per_meter(a.units_per_meter, cfg)?;
    let params = ExtractParams {
        epsilon: cfg.or(a.epsilon, "epsilon")?,
        degree: cfg.or(a.degree, "degree")?.unwrap_or(trajectory::SMOOTHING_DEGREE),
        weights: match a.weights {
            Weights::Uniform => WeightProfile::Uniform,
            Weights::Endpoints => WeightProfile::EndpointEmphasis,
        },
        keypoints: a.k,
    };
    let k = raster::read_intrinsics(&a.intrinsics)?;
    let depth = raster::read_depth(&a.depth, upm)?;
    let track: Track2D = read_json(&a.track)?;
    let ex = trajectory::extract(&track, &depth, &k, &params)?;
    let out = json!({
        "frame": "camera",
        "waypoints": ex.waypoints,
        "trace": ex.trace,
        "params": {
            "epsilon": ex.trace.epsilon,
            "degree": params.degree,
            "keypoints": params.keypoints,
            "weights": params.weights,
            "units_per_meter": upm,
        },
    });
    write_json(&a.out, &out)
}

fn thousand_point(p: [f64; 2]) -> Result<[u32; 2], CliError> {
    let ok = |x: f64| x.fract() == 0.0 && (0.0..=1000.0).contains(&x);
    if ok(p[0]) && ok(p[1]) {
        Ok([p[0] as u32, p[1] as u32])
    } else {
        Err(CliError::input(format!("{p:?} is not a thousand-scale integer pair")))
    }
}

pub fn lift(a: &LiftArgs, cfg: &Config) -> Result<(), CliError> {
    require_files(&[&a.traj2d, &a.anchor, &a.depth, &a.intrinsics])?;
    let upm = units_per_meter(a.units_per_meter, cfg)?;
    let tolerance = cfg
        .or(a.anchor_tolerance, "anchor_tolerance")?
        .unwrap_or(trajectory::DEFAULT_ANCHOR_TOLERANCE);
    let k = raster::read_intrinsics(&a.intrinsics)?;
    let depth = raster::read_depth(&a.depth, upm)?;
    let raw: Vec<[f64; 2]> = read_json(&a.traj2d)?;
    let pixels = raw
        .iter()
        .map(|&p| {
            if a.thousand {
                thousand_point(p).map(|q| geometry::from_thousand(q, &k))
            } else {
                Ok(Pixel::new(p[0], p[1]))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let t = CanonicalTrajectory::from_slice(&pixels)?;
    let anchor: DepthAnchor = read_json(&a.anchor)?;
    let lifted = trajectory::lift_2d(&t, &depth, &k, &anchor, tolerance)?;
    let out = json!({
        "frame": lifted.frame(),
        "waypoints": lifted.waypoints(),
        "params": {
            "anchor_tolerance": tolerance,
            "thousand_scale": a.thousand,
            "units_per_meter": upm,
        },
    });
    write_json(&a.out, &out)
}

// ---------------------------------------------------------------------------

fn parse_mask_arg(s: &str) -> Result<(String, PathBuf), CliError> {
    match s.split_once('=') {
        Some((id, path)) if !id.is_empty() && !path.is_empty() => Ok((id.to_string(), PathBuf::from(path))),
        _ => Err(CliError::input(format!("--mask expects ID=PATH, got {s:?}"))),
    }
}

pub fn augment(a: &AugmentArgs, cfg: &Config, mode: ExecMode) -> Result<(), CliError> {
    let mask_args = a.masks.iter().map(|m| parse_mask_arg(m)).collect::<Result<Vec<_>, _>>()?;
    let mut files = vec![a.rgb.as_path(), &a.depth, &a.intrinsics, &a.guidance];
    files.extend(mask_args.iter().map(|(_, p)| p.as_path()));
    files.extend(a.camera_pose.as_deref());
    require_files(&files)?;

    let upm = units_per_meter(a.units_per_meter, cfg)?;
    let k: CameraIntrinsics = raster::read_intrinsics(&a.intrinsics)?;
    let defaults = AugmentParams::default();
    let mut params = AugmentParams {
        tube_radius: cfg.or(a.tube_radius, "tube_radius")?.unwrap_or(defaults.tube_radius),
        tube_shape: cfg.or(a.tube_shape, "tube_shape")?.map_or(defaults.tube_shape, Into::into),
        fallback_radius: cfg.or(a.fallback_radius, "fallback_radius")?.unwrap_or(defaults.fallback_radius),
        sigma: cfg.or(a.sigma, "sigma")?,
        alpha: cfg.or(a.alpha, "alpha")?.unwrap_or(defaults.alpha),
        ..defaults
    };
    if let Some(t) = cfg.or(a.inpaint_threshold, "inpaint_threshold")? {
        params.inpaint.threshold = t;
    }
    // Record the sigma actually used.
    params.sigma = Some(params.sigma.unwrap_or_else(|| guidance::default_sigma(&k)));
    let aug_mode = match a.mode {
        Mode::Frozen => AugmentMode::Frozen,
        Mode::Finetuned => AugmentMode::Finetuned,
    };

    let rgb = raster::read_rgb(&a.rgb)?;
    let depth = raster::read_depth(&a.depth, upm)?;
    let package: GuidancePackage = read_json(&a.guidance)?;
    let pose: RigidTransform = match &a.camera_pose {
        Some(p) => read_json(p)?,
        None => RigidTransform::identity(),
    };
    let masks = mask_args
        .iter()
        .map(|(id, p)| Ok(InstanceMask::new(id.clone(), raster::read_mask(p)?)))
        .collect::<Result<Vec<_>, CliError>>()?;

    let r = guidance::augment(&rgb, &depth, &masks, &package, aug_mode, &k, &pose, &params, mode)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    let obs = &r.observation;
    raster::write_rgb(&dir.join("rgb.png"), &obs.rgb)?;
    raster::write_depth_f32(&dir.join("depth.f32"), &obs.depth)?;
    let (w, h) = obs.weights.dims();
    raster::write_float_raster(
        &dir.join("weights.f32"),
        &FloatRaster {
            width: w,
            height: h,
            scale: 1.0,
            values: obs.weights.values().to_vec(),
        },
    )?;
    let report = json!({
        "mode": aug_mode,
        "params": params,
        "units_per_meter": upm,
        "relevance": r.report,
        "files": ["rgb.png", "depth.f32", "weights.f32"],
    });
    write_json(&dir.join("report.json"), &report)
}

// ---------------------------------------------------------------------------

fn parse_kind(s: &str) -> Result<TaskKind, CliError> {
    let s = s.trim();
    TaskKind::ALL
        .into_iter()
        .find(|k| k.name() == s || k.name().split('_').next() == Some(s))
        .ok_or_else(|| {
            let names: Vec<&str> = TaskKind::ALL.iter().map(|k| k.name()).collect();
            CliError::input(format!("unknown kind {s:?}; expected one of {}", names.join(", ")))
        })
}

pub fn gen_dataset(a: &GenDatasetArgs, mode: ExecMode) -> Result<(), CliError> {
    if !a.root.is_dir() {
        return Err(CliError::input(format!("{}: no such directory", a.root.display())));
    }
    if let Some(p) = &a.prompts {
        require_files(&[p])?;
    }
    let split = match a.split.as_deref() {
        None => None,
        Some("bundled") => Some(SplitSpec::bundled()),
        Some(p) => {
            let p = Path::new(p);
            require_files(&[p])?;
            Some(SplitSpec::from_json(&read_text(p)?)?)
        }
    };
    let kinds = a.kinds.iter().map(|k| parse_kind(k)).collect::<Result<Vec<_>, _>>()?;
    if a.shard_size == 0 {
        return Err(CliError::input("--shard-size must be positive"));
    }
    let templates = match &a.prompts {
        Some(p) => PromptTemplates::load(p)?,
        None => PromptTemplates::default(),
    };
    let opts = GenerateOptions {
        params: GenParams::default(),
        templates,
        split: split.as_ref(),
        kinds,
        shard: if a.per_file {
            ShardMode::PerFile
        } else {
            ShardMode::JsonLines {
                shard_size: a.shard_size,
            }
        },
        exec: mode,
    };
    let m = dataset::generate_dataset(&a.root, &a.out, &opts)?;
    println!(
        "{}",
        json!({"videos": m.videos, "samples": m.samples, "counts": m.counts, "skipped": m.skipped.len()})
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(untagged)]
enum TrajFile {
    Many(Vec<Vec<Vec<f64>>>),
    One(Vec<Vec<f64>>),
}

impl TrajFile {
    fn into_many(self) -> Vec<Vec<Vec<f64>>> {
        match self {
            TrajFile::Many(v) => v,
            TrajFile::One(v) => vec![v],
        }
    }
}

fn check_len(pred: usize, gt: usize) -> Result<(), CliError> {
    if pred == gt {
        Ok(())
    } else {
        Err(metrics::MetricsError::LengthMismatch {
            predicted: pred,
            truth: gt,
        }
        .into())
    }
}

fn trajectory_report(pred: Vec<Vec<Vec<f64>>>, gt: Vec<Vec<Vec<f64>>>) -> Result<MetricReport, CliError> {
    check_len(pred.len(), gt.len())?;
    let dim = pred.iter().chain(&gt).flatten().map(Vec::len).next().unwrap_or(2);
    if pred.iter().chain(&gt).flatten().any(|p| p.len() != dim) || !(dim == 2 || dim == 3) {
        return Err(CliError::input("trajectory points must all be 2D or all be 3D"));
    }
    let e = if dim == 2 {
        let conv = |t: &Vec<Vec<f64>>| t.iter().map(|p| Pixel::new(p[0], p[1])).collect::<Vec<_>>();
        let pairs: Vec<_> = pred.iter().zip(&gt).map(|(p, g)| (conv(p), conv(g))).collect();
        metrics::traj_errors_mean(&pairs)?
    } else {
        let conv = |t: &Vec<Vec<f64>>| t.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect::<Vec<_>>();
        let pairs: Vec<_> = pred.iter().zip(&gt).map(|(p, g)| (conv(p), conv(g))).collect();
        metrics::traj_errors_mean(&pairs)?
    };
    let mut r = MetricReport::default();
    r.sections.insert(
        "trajectory".into(),
        BTreeMap::from([("rmse".to_string(), e.rmse), ("mae".to_string(), e.mae)]),
    );
    r.counts.insert("trajectory".into(), pred.len());
    Ok(r)
}

pub fn eval(a: &EvalArgs, cfg: &Config) -> Result<(), CliError> {
    let threshold = cfg.or(a.threshold, "threshold")?;
    let report = match (a.kind, &a.records) {
        (Some(kind), _) => {
            let (pred, gt) = (a.pred.as_deref().expect("clap"), a.gt.as_deref().expect("clap"));
            if kind == EvalKind::Pointing && threshold.is_none() {
                return Err(CliError::input("usage: --threshold is required for pointing"));
            }
            require_files(&[pred, gt])?;
            match kind {
                EvalKind::Pointing => {
                    let p: Vec<[f64; 2]> = read_json(pred)?;
                    let g: Vec<[f64; 2]> = read_json(gt)?;
                    check_len(p.len(), g.len())?;
                    let px = |v: &Vec<[f64; 2]>| v.iter().map(|q| Pixel::new(q[0], q[1])).collect::<Vec<_>>();
                    let s = metrics::pointing_stats(&px(&p), &px(&g), threshold.expect("checked"))?;
                    let mut r = MetricReport::default();
                    r.sections.insert(
                        "pointing".into(),
                        BTreeMap::from([("med".to_string(), s.med), ("sr".to_string(), s.sr)]),
                    );
                    r.counts.insert("pointing".into(), p.len());
                    r
                }
                EvalKind::Trajectory => {
                    let p: TrajFile = read_json(pred)?;
                    let g: TrajFile = read_json(gt)?;
                    trajectory_report(p.into_many(), g.into_many())?
                }
                EvalKind::Depth => {
                    let p: Vec<f64> = read_json(pred)?;
                    let g: Vec<f64> = read_json(gt)?;
                    check_len(p.len(), g.len())?;
                    let pairs: Vec<DepthPair> = p.iter().zip(&g).map(|(&pred, &gt)| DepthPair { pred, gt }).collect();
                    let d = metrics::depth_metrics(&pairs)?;
                    let mut r = MetricReport::default();
                    r.sections.insert(
                        "depth".into(),
                        BTreeMap::from([
                            ("ratio_accuracy".to_string(), d.ratio_accuracy),
                            ("mad_cm".to_string(), d.mad_cm),
                        ]),
                    );
                    r.counts.insert("depth".into(), p.len());
                    r
                }
            }
        }
        (None, Some(path)) => {
            require_files(&[path])?;
            let records = metrics::parse_records(&read_text(path)?)?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            let options = EvalOptions {
                threshold,
                scorer: a.scorer.clone(),
            };
            metrics::evaluate(&records, &options, &ScorerRegistry::default(), |rel| {
                raster::read_mask(&base.join(rel)).map_err(|e| e.to_string())
            })
            .map_err(|e| match e {
                metrics::MetricsError::MissingThreshold => {
                    CliError::input("usage: --threshold is required for pointing records")
                }
                e => e.into(),
            })?
        }
        (None, None) => unreachable!("clap requires --kind or --records"),
    };
    let out = json!({
        "params": {"threshold": threshold, "scorer": a.scorer.as_deref().unwrap_or(metrics::DEFAULT_SCORER)},
        "report": report,
    });
    match &a.out {
        Some(p) => write_json(p, &out),
        None => {
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::input(format!("cannot parse seeds {s:?}; use A..B or a comma list"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(CliError::input(format!("seed range {s:?} is empty")));
    }
    Ok(seeds)
}

fn load_scenario(name: &str) -> Result<Scenario, CliError> {
    if sim::BUNDLED_SCENARIOS.contains(&name) {
        return Ok(Scenario::bundled(name)?);
    }
    let p = Path::new(name);
    if !p.is_file() {
        return Err(CliError::input(format!(
            "{name:?} is neither a bundled scenario ({}) nor a file",
            sim::BUNDLED_SCENARIOS.join(", ")
        )));
    }
    Ok(Scenario::from_json(&read_text(p)?)?)
}

enum Agent {
    Mock,
    Exec(String),
}

fn parse_agent(s: &str) -> Result<Agent, CliError> {
    match s {
        "mock" => Ok(Agent::Mock),
        _ => match s.strip_prefix("exec:") {
            Some(c) if !c.trim().is_empty() => Ok(Agent::Exec(c.to_string())),
            _ => Err(CliError::input(format!("expected \"mock\" or \"exec:COMMAND\", got {s:?}"))),
        },
    }
}

pub fn simulate(a: &SimulateArgs, cfg: &Config, mode: ExecMode) -> Result<(), CliError> {
    let seeds = parse_seeds(&a.seeds)?;
    let planner = parse_agent(&a.planner)?;
    let policy = parse_agent(&a.policy)?;
    let replan = cfg.or(a.replan, "replan_interval")?;
    let max_steps = cfg.or(a.max_steps, "max_steps")?;
    let step_length = cfg.or(a.step_length, "step_length")?;
    let tube_radius = cfg.or(a.tube_radius, "tube_radius")?;
    let tube_shape = cfg.or(a.tube_shape, "tube_shape")?;
    let grasp_tolerance = cfg.get::<f64>("grasp_tolerance")?;

    let mut scenarios = Vec::new();
    for name in &a.scenarios {
        let mut s = load_scenario(name)?;
        let e = &mut s.episode;
        if let Some(h) = replan {
            e.replan_interval = h;
        }
        if let Some(m) = max_steps {
            e.max_steps = m;
        }
        if let Some(l) = step_length {
            e.step_length = l;
        }
        if let Some(r) = tube_radius {
            e.augment.tube_radius = r;
        }
        if let Some(t) = tube_shape {
            e.augment.tube_shape = t.into();
        }
        if let Some(g) = grasp_tolerance {
            e.grasp_tolerance = g;
        }
        if a.no_stage_loop {
            e.stage_loop = false;
        }
        s.validate()?;
        scenarios.push(s);
    }

    let io_dir = a.out.join("plugin_io");
    let episode_dir = |s: &Scenario| io_dir.join(format!("{}_seed{}", s.name, s.episode.seed));
    let make_planner = |s: &Scenario| -> Result<Box<dyn Planner>, SimError> {
        Ok(match &planner {
            Agent::Mock => Box::new(MockPlanner),
            Agent::Exec(c) => Box::new(ExecPlanner::spawn(c, &episode_dir(s).join("planner"))?),
        })
    };
    let make_policy = |s: &Scenario| -> Result<Box<dyn Policy>, SimError> {
        Ok(match &policy {
            Agent::Mock => Box::new(MockPolicy::new(s.episode.step_length)),
            Agent::Exec(c) => Box::new(ExecPolicy::spawn(c, &episode_dir(s).join("policy"))?),
        })
    };
    let result = sim::run_suite(&scenarios, &seeds, &make_planner, &make_policy, mode)?;

    for e in &result.episodes {
        write_json(&a.out.join("traces").join(format!("{}_seed{}.json", e.scenario, e.seed)), e)?;
    }
    let configs: Vec<Value> = scenarios
        .iter()
        .map(|s| {
            json!({
                "name": s.name,
                "replan_interval": s.episode.replan_interval,
                "max_steps": s.episode.max_steps,
                "stage_loop": s.episode.stage_loop,
                "step_length": s.episode.step_length,
                "grasp_tolerance": s.episode.grasp_tolerance,
                "action_noise": s.episode.action_noise,
                "spawn_jitter": s.episode.spawn_jitter,
                "mode": s.episode.mode,
                "augment": s.episode.augment,
            })
        })
        .collect();
    let report = json!({
        "params": {"seeds": seeds, "planner": a.planner, "policy": a.policy},
        "scenarios": configs,
        "reports": result.reports,
    });
    write_json(&a.out.join("report.json"), &report)?;
    for r in &result.reports {
        println!(
            "{}: {:.1} ± {:.2} over {} seeds",
            r.scenario,
            r.stats.mean,
            r.stats.std,
            r.episodes.len()
        );
    }
    Ok(())
}

pub fn plan_server() -> Result<(), CliError> {
    let stdin = io::stdin();
    sim::serve_mock_planner(stdin.lock(), io::stdout().lock())
        .map_err(|e| CliError::new(crate::error::Category::Plugin, e.to_string()))
}

pub fn act_server(step_length: f64) -> Result<(), CliError> {
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    sim::serve_mock_policy(stdin.lock(), &mut out, step_length)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::new(crate::error::Category::Plugin, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_specs() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn kinds_and_masks() {
        assert_eq!(parse_kind("planning").unwrap(), TaskKind::Planning4D);
        assert_eq!(parse_kind("depth_3d").unwrap(), TaskKind::Depth3D);
        assert!(parse_kind("video").is_err());
        assert_eq!(parse_mask_arg("mug=a/b.png").unwrap(), ("mug".into(), PathBuf::from("a/b.png")));
        assert!(parse_mask_arg("=x").is_err());
    }

    #[test]
    fn thousand_points_are_integers() {
        assert_eq!(thousand_point([500.0, 1000.0]).unwrap(), [500, 1000]);
        assert!(thousand_point([500.5, 1.0]).is_err());
        assert!(thousand_point([1001.0, 1.0]).is_err());
    }
}
