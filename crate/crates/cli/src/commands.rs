//! Subcommand drivers. Each writes self-describing CSV rows; output depends
//! only on the configuration and the seed.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use hbm_analytics::join::{
    self, JoinFlags, JoinParams, JoinScenario, DEFAULT_TABLE_CAPACITY,
};
use hbm_analytics::mem_model::HbmGeometry;
use hbm_analytics::orchestrator::verify_join;
use hbm_analytics::select::{self, RangePredicate, SelectParams, SelectionScenario};
use hbm_analytics::sgd::{
    self, Dataset, DatasetPreset, LabelKind, SgdConfig, SgdPlacement, SgdScenario, PRESETS,
};
use hbm_analytics::traffic::{run_microbenchmark, MicrobenchSpec};
use hbm_analytics::{Error, PlacementMode, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetSource, RunConfig};

/// Values of generated selection columns lie in `[0, SELECT_DOMAIN)`.
const SELECT_DOMAIN: i32 = 1_000_000_000;
/// Largest |L| * |S| checked with the nested-loop oracle.
const NESTED_LOOP_LIMIT: u64 = 20_000_000;

fn writer(out: impl Write) -> csv::Writer<impl Write> {
    csv::WriterBuilder::new().from_writer(out)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(csv_err)
}

fn finish<W: Write>(mut w: csv::Writer<W>) -> Result<()> {
    w.flush()?;
    Ok(())
}

pub fn cmd_ubench(config: &RunConfig, out: impl Write) -> Result<()> {
    let sweep = &config.ubench;
    sweep.validate()?;
    let g = &config.system.geometry;
    if let Some(k) = sweep.ports.iter().find(|&&k| k == 0 || k > g.raw_port_count()) {
        return Err(Error::Configuration(format!(
            "port count {k} outside 1..={}",
            g.raw_port_count()
        )));
    }
    let max = sweep.ports.iter().copied().max().unwrap_or(1);
    let mut w = writer(out);
    write_row(&mut w, &["num_ports", "separation_mib", "direction", "aggregate_gbps"].map(String::from))?;
    for &separation_mib in &sweep.separations_mib {
        for &direction in &sweep.directions {
            let spec = MicrobenchSpec {
                num_ports: max,
                separation_mib,
                direction,
                ..MicrobenchSpec::default()
            };
            let curve = run_microbenchmark(g, &spec)?;
            for &k in &sweep.ports {
                let point = curve[(k - 1) as usize];
                write_row(
                    &mut w,
                    &[
                        k.to_string(),
                        separation_mib.to_string(),
                        direction.to_string(),
                        point.aggregate_gbps.to_string(),
                    ],
                )?;
            }
        }
    }
    finish(w)
}

pub fn cmd_select(config: &RunConfig, seed: u64, out: impl Write) -> Result<()> {
    let sweep = &config.select;
    sweep.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let column: Vec<i32> = (0..sweep.verify_items).map(|_| rng.random_range(0..SELECT_DOMAIN)).collect();

    let mut w = writer(out);
    write_row(
        &mut w,
        &[
            "num_engines",
            "selectivity",
            "placement",
            "modeled_gbps",
            "oracle_matches",
            "include_copy",
            "oracle_pass",
        ]
        .map(String::from),
    )?;
    for &selectivity in &sweep.selectivities {
        let upper = (selectivity * f64::from(SELECT_DOMAIN)).round() as i32;
        let predicate = RangePredicate::new(-1, upper);
        let (padded, _) = select::engine_select(&column, predicate, SelectParams::default());
        let oracle = select::select_oracle(&column, predicate);
        let pass = select::compact(&padded).is_ok_and(|got| got == oracle);
        for &num_engines in &sweep.engines {
            for &placement in &sweep.placements {
                for &include_output_copy in &sweep.include_copy {
                    let scenario = SelectionScenario {
                        num_engines,
                        selectivity,
                        placement,
                        include_output_copy,
                        input_bytes: 4 * sweep.model_items,
                    };
                    let rate = select::model_selection_rate(&config.system, &scenario)?.gbps();
                    write_row(
                        &mut w,
                        &[
                            num_engines.to_string(),
                            selectivity.to_string(),
                            placement.to_string(),
                            rate.to_string(),
                            oracle.num_matches.to_string(),
                            include_output_copy.to_string(),
                            pass.to_string(),
                        ],
                    )?;
                }
            }
        }
    }
    finish(w)
}

/// Probe side of distinct keys and a build side drawn from them, so that
/// every build tuple finds exactly one partner.
fn join_inputs(l_tuples: usize, s_tuples: usize, s_unique: bool, rng: &mut ChaCha8Rng) -> (Vec<i32>, Vec<i32>) {
    let mut l: Vec<i32> = (0..l_tuples as i32).collect();
    l.shuffle(rng);
    let s = if s_unique {
        l[..s_tuples].to_vec()
    } else {
        let distinct = s_tuples.div_ceil(2);
        let mut s: Vec<i32> = l[..distinct].iter().flat_map(|&k| [k, k]).take(s_tuples).collect();
        s.shuffle(rng);
        s
    };
    (l, s)
}

pub fn cmd_join(config: &RunConfig, seed: u64, out: impl Write) -> Result<()> {
    let sweep = &config.join;
    sweep.validate()?;
    let mut w = writer(out);
    write_row(
        &mut w,
        &[
            "num_engines",
            "s_size",
            "l_size",
            "s_unique",
            "l_load",
            "handle_collisions",
            "passes",
            "modeled_gbps",
            "modeled_seconds",
            "matches",
            "oracle_pass",
        ]
        .map(String::from),
    )?;
    for &s_size in &sweep.s_sizes {
        for &l_size in &sweep.l_sizes {
            for &s_unique in &sweep.s_unique {
                for &l_load in &sweep.l_load {
                    for &handle_collisions in &sweep.handle_collisions {
                        let flags = JoinFlags {
                            l_load,
                            s_unique,
                            handle_collisions,
                            build_table: sweep.build_table,
                        };
                        if flags.validate().is_err() {
                            log::warn!("skipping non-unique build side without collision handling");
                            continue;
                        }
                        for &num_engines in &sweep.engines {
                            let scenario = JoinScenario {
                                num_engines,
                                l_tuples: l_size,
                                s_tuples: s_size,
                                matches: s_size,
                                flags,
                            };
                            let report = join::model_join_rate(&config.system, &scenario)?;
                            let pass = verify_join_run(sweep, s_size, l_size, &flags, num_engines, seed)?;
                            write_row(
                                &mut w,
                                &[
                                    num_engines.to_string(),
                                    s_size.to_string(),
                                    l_size.to_string(),
                                    s_unique.to_string(),
                                    l_load.to_string(),
                                    handle_collisions.to_string(),
                                    scenario.passes().to_string(),
                                    report.gbps().to_string(),
                                    report.total_seconds().to_string(),
                                    s_size.to_string(),
                                    pass.to_string(),
                                ],
                            )?;
                        }
                    }
                }
            }
        }
    }
    finish(w)
}

/// Runs the functional engines on a scaled-down instance of the row.
fn verify_join_run(
    sweep: &crate::config::JoinSweep,
    s_size: u64,
    l_size: u64,
    flags: &JoinFlags,
    num_engines: usize,
    seed: u64,
) -> Result<bool> {
    let l_tuples = (l_size as usize).min(sweep.verify_l_tuples);
    let s_tuples = (s_size as usize).min(sweep.verify_s_max).min(l_tuples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ s_size.rotate_left(17) ^ l_size);
    let (l, s) = join_inputs(l_tuples, s_tuples, flags.s_unique, &mut rng);
    let params = JoinParams {
        table_capacity: DEFAULT_TABLE_CAPACITY,
        ..JoinParams::default()
    };
    let (padded, _) = join::join_engines(&l, &s, num_engines, flags, params)?;
    let result = join::compact(&padded)?;
    Ok(if (l.len() as u64) * (s.len() as u64) <= NESTED_LOOP_LIMIT {
        result == join::join_oracle(&l, &s)
    } else {
        verify_join(&l, &s, &result)
    })
}

pub fn load_dataset(source: &DatasetSource, seed: u64) -> Result<Dataset> {
    let data = if let Some(name) = &source.preset {
        let preset = DatasetPreset::find(name)
            .ok_or_else(|| Error::Configuration(format!("unknown dataset preset `{name}`")))?;
        sgd::generate_synthetic_noisy(preset.m, preset.n, preset.kind, source.noise, seed)?.dataset
    } else if let Some(path) = &source.file {
        Dataset::read_binary(BufReader::new(File::open(path)?))?
    } else if let Some(path) = &source.delimited {
        Dataset::read_delimited(BufReader::new(File::open(path)?), source.kind)?
    } else {
        sgd::generate_synthetic_noisy(source.m, source.n, source.kind, source.noise, seed)?.dataset
    };
    match data.kind() {
        LabelKind::Multiclass(_) => data.one_vs_rest(source.class),
        _ => Ok(data),
    }
}

pub fn cmd_sgd(config: &RunConfig, seed: u64, out: impl Write) -> Result<()> {
    let sweep = &config.sgd;
    sweep.validate()?;
    let data = load_dataset(&sweep.dataset, seed)?;
    let mut configs = Vec::new();
    for &step_size in &sweep.step_sizes {
        for &lambda in &sweep.lambdas {
            for &minibatch in &sweep.minibatches {
                configs.push(SgdConfig {
                    step_size,
                    lambda,
                    minibatch,
                    epochs: sweep.epochs,
                    loss: sweep.loss,
                    update_rule: sweep.update_rule,
                });
            }
        }
    }
    let outcome = sgd::hyperparam_search(&config.system, &data, &configs, sweep.engines, sweep.placement, sweep.pipeline)?;

    let mut w = writer(out);
    let mut header: Vec<String> = ["job_id", "loss", "step_size", "lambda", "minibatch"].map(String::from).to_vec();
    header.extend((1..=sweep.epochs).map(|e| format!("loss_epoch_{e}")));
    header.extend(["modeled_gbps", "wall_time_modeled"].map(String::from));
    write_row(&mut w, &header)?;
    for job in &outcome.jobs {
        let mut row = vec![
            job.job_id.to_string(),
            job.config.loss.to_string(),
            job.config.step_size.to_string(),
            job.config.lambda.to_string(),
            job.config.minibatch.to_string(),
        ];
        row.extend(job.trajectory.iter().map(f64::to_string));
        row.push(job.engine_gbps.to_string());
        row.push(job.seconds.to_string());
        write_row(&mut w, &row)?;
    }
    finish(w)
}

/// Modeled SGD rate over engine counts for every preset shape.
fn sgd_scaling(config: &RunConfig, out: impl Write) -> Result<()> {
    let mut w = writer(out);
    write_row(
        &mut w,
        &["dataset", "num_engines", "placement", "minibatch", "modeled_gbps"].map(String::from),
    )?;
    for preset in PRESETS {
        for placement in [SgdPlacement::Replicated, SgdPlacement::Nonreplicated] {
            for num_engines in 1..=config.system.engine_ports().len() {
                let scenario = SgdScenario {
                    num_engines,
                    dataset_bytes: preset.size_bytes(),
                    n: preset.n,
                    minibatch: 16,
                    placement,
                    pipeline: config.sgd.pipeline,
                };
                let rate = sgd::model_sgd_rate(&config.system, &scenario)?;
                write_row(
                    &mut w,
                    &[
                        preset.name.to_string(),
                        num_engines.to_string(),
                        placement.to_string(),
                        "16".to_string(),
                        rate.to_string(),
                    ],
                )?;
            }
        }
    }
    finish(w)
}

/// Writes every figure-shaped table into `dir`.
pub fn cmd_report(config: &RunConfig, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };

    cmd_ubench(config, file("bandwidth_vs_ports.csv")?)?;
    let fast = RunConfig {
        system: hbm_analytics::SystemConfig {
            geometry: HbmGeometry::at_300mhz(),
            ..config.system
        },
        ..config.clone()
    };
    cmd_ubench(&fast, file("bandwidth_vs_ports_300mhz.csv")?)?;

    let mut scaling = config.clone();
    scaling.select.engines = (1..=config.system.engine_ports().len()).collect();
    scaling.select.selectivities = vec![0.0];
    scaling.select.placements = vec![PlacementMode::Partitioned, PlacementMode::NonPartitioned];
    scaling.select.include_copy = vec![false];
    cmd_select(&scaling, seed, file("select_vs_engines.csv")?)?;
    cmd_select(config, seed, file("select_vs_selectivity.csv")?)?;

    let mut table = config.clone();
    table.join.engines = vec![1, 7];
    table.join.s_sizes = vec![4096];
    table.join.l_sizes = vec![512_000_000];
    table.join.s_unique = vec![true, false];
    table.join.l_load = vec![true, false];
    table.join.handle_collisions = vec![true, false];
    cmd_join(&table, seed, file("join_configurations.csv")?)?;

    let mut passes = config.clone();
    passes.join.engines = vec![7];
    passes.join.s_sizes = (0..=11).map(|k| 8192u64 << k).collect();
    passes.join.l_sizes = vec![512_000_000];
    passes.join.s_unique = vec![true];
    passes.join.l_load = vec![false];
    passes.join.handle_collisions = vec![false];
    cmd_join(&passes, seed, file("join_vs_build_size.csv")?)?;

    sgd_scaling(config, file("sgd_vs_engines.csv")?)?;
    cmd_sgd(config, seed, file("sgd_loss_vs_minibatch.csv")?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_of(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> String {
        let mut buf = Vec::new();
        f(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn default_ubench_grid() {
        let text = csv_of(|b| cmd_ubench(&RunConfig::default(), b));
        assert_eq!(text.lines().count(), 1 + 160);
    }

    #[test]
    fn single_ubench_point() {
        let mut c = RunConfig::default();
        c.ubench.ports = vec![32];
        c.ubench.separations_mib = vec![256];
        let text = csv_of(|b| cmd_ubench(&c, b));
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        let gbps: f64 = row[3].parse().unwrap();
        assert!((gbps - 190.0).abs() / 190.0 < 0.03);
        c.ubench.ports = vec![33];
        assert!(cmd_ubench(&c, Vec::new()).is_err());
    }

    #[test]
    fn join_inputs_pair_every_build_tuple() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (l, s) = join_inputs(1000, 101, false, &mut rng);
        assert_eq!(s.len(), 101);
        assert_eq!(join::join_oracle(&l, &s).num_matches, 101);
        let (l, s) = join_inputs(1000, 100, true, &mut rng);
        assert_eq!(join::join_oracle(&l, &s).num_matches, 100);
    }

    #[test]
    fn small_select_sweep_passes_oracle() {
        let mut c = RunConfig::default();
        c.select.verify_items = 10_000;
        let text = csv_of(|b| cmd_select(&c, 3, b));
        assert_eq!(text.lines().count(), 1 + 7 * 2);
        assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
    }

    #[test]
    fn multiclass_presets_train_one_class() {
        let source = DatasetSource {
            m: 50,
            n: 4,
            kind: LabelKind::Multiclass(3),
            class: 1,
            ..DatasetSource::default()
        };
        let data = load_dataset(&source, 1).unwrap();
        assert_eq!(data.kind(), LabelKind::Binary);
        let bad = DatasetSource {
            preset: Some("nope".into()),
            ..DatasetSource::default()
        };
        assert!(matches!(load_dataset(&bad, 1), Err(Error::Configuration(_))));
    }
}
