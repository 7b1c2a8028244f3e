//! The experiment pipelines behind each subcommand.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};

use recourse_core::model::{Classifier, Objective, Scorer};
use recourse_core::recourse::{RecourseAction, UncertaintySpec};

use crate::config::ExperimentConfig;
use crate::pipeline::{
    attack_action, checked_recourse, ensure_dir, log_histogram, mix_seed, parallel_map, CsvFile,
    Experiment,
};

fn objective_name(objective: &Objective) -> &'static str {
    match objective {
        Objective::Erm => "erm",
        Objective::Af => "af",
        Objective::Allr { .. } => "allr",
        Objective::Ross { .. } => "ross",
    }
}

fn seeds(config: &ExperimentConfig, default_n: usize) -> Vec<u64> {
    let n = config.n_seeds.unwrap_or(default_n) as u64;
    (config.seed..config.seed + n.max(1)).collect()
}

fn load_model(exp: &Experiment, seed: u64) -> Result<Classifier<f64>> {
    let path = exp.model_path(seed);
    if !path.exists() {
        bail!(
            "no trained model at {} — run the train subcommand first",
            path.display()
        );
    }
    Classifier::load(&path).with_context(|| format!("loading {}", path.display()))
}

/// Capped list of negatively classified test individuals.
fn rejected_individuals(
    classifier: &Classifier<f64>,
    test: &recourse_core::data::Dataset<f64>,
    cap: usize,
) -> Result<Vec<usize>> {
    let negatives = test.negatively_classified(classifier);
    if negatives.is_empty() {
        bail!("no negatively classified individuals in the test split");
    }
    Ok(negatives.into_iter().take(cap).collect())
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<()> {
    let exp = Experiment::assemble(config)?;
    ensure_dir(&exp.out_dir)?;
    let mut metrics = CsvFile::new(
        "config_hash,seed,objective,epochs,train_rows,test_rows,threshold,accuracy,mcc,final_loss,mean_penalty",
    );
    for seed in seeds(config, 1) {
        let (classifier, report, m) =
            exp.train_seed(config, config.model.objective.clone(), seed)?;
        classifier.save(&exp.model_path(seed))?;
        exp.write_manifest(config, seed)?;

        let mut trace = CsvFile::new("config_hash,seed,epoch,loss,penalty");
        for (epoch, (loss, pen)) in report
            .loss_trace
            .iter()
            .zip(&report.penalty_trace)
            .enumerate()
        {
            trace.row(format!("{},{},{},{},{}", exp.hash, seed, epoch, loss, pen));
        }
        trace.save(&exp.out_dir.join(format!("loss_trace_seed{seed}.csv")))?;

        let final_loss = report.loss_trace.last().copied().unwrap_or(f64::NAN);
        let mean_penalty = if report.penalty_trace.is_empty() {
            0.0
        } else {
            report.penalty_trace.iter().sum::<f64>() / report.penalty_trace.len() as f64
        };
        metrics.row(format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            exp.hash,
            seed,
            objective_name(&config.model.objective),
            config.model.epochs,
            m.train_rows,
            m.test_rows,
            m.threshold,
            m.accuracy,
            m.mcc,
            final_loss,
            mean_penalty
        ));
    }
    metrics.save(&exp.out_dir.join("metrics.csv"))?;
    println!("train: wrote {}", exp.out_dir.display());
    Ok(())
}

pub fn cmd_fragility(config: &ExperimentConfig) -> Result<()> {
    let exp = Experiment::assemble(config)?;
    ensure_dir(&exp.out_dir)?;
    let seed = config.seed;
    let classifier = load_model(&exp, seed)?;
    let (_, test) = exp.dataset(config, seed)?;
    let ids = rejected_individuals(&classifier, &test, config.sample_cap)?;

    let unc = UncertaintySpec::none();
    let solver = config.solver.to_params();
    let attack = config.attack.to_params();

    struct Row {
        id: usize,
        found: bool,
        cost: f64,
        magnitude: f64,
        success: bool,
    }
    let rows: Vec<Row> = parallel_map(config.workers, &ids, |id| {
        let x = &test.features[id];
        match checked_recourse(&classifier, &exp.scm, x, &exp.feasibility, &unc, &exp.cost, &solver)? {
            None => Ok(Row {
                id,
                found: false,
                cost: f64::NAN,
                magnitude: f64::NAN,
                success: false,
            }),
            Some((action, cost)) => {
                let out = attack_action(&classifier, &exp.scm, x, &action, &attack, mix_seed(seed, id))?;
                Ok(Row {
                    id,
                    found: true,
                    cost,
                    magnitude: out.magnitude,
                    success: out.success,
                })
            }
        }
    })?;

    let mut csv = CsvFile::new("config_hash,seed,id,found,cost,attack_magnitude,attack_success");
    let mut magnitudes = Vec::new();
    for r in &rows {
        csv.row(format!(
            "{},{},{},{},{},{},{}",
            exp.hash,
            seed,
            r.id,
            u8::from(r.found),
            r.cost,
            r.magnitude,
            u8::from(r.success)
        ));
        if r.found && r.success {
            magnitudes.push(r.magnitude);
        }
    }
    csv.save(&exp.out_dir.join("fragility.csv"))?;
    log_histogram(&magnitudes, &exp.hash, seed).save(&exp.out_dir.join("fragility_hist.csv"))?;
    println!(
        "fragility: {} individuals, {} invalidated; wrote {}",
        rows.len(),
        magnitudes.len(),
        exp.out_dir.display()
    );
    Ok(())
}

pub fn cmd_robustness(config: &ExperimentConfig) -> Result<()> {
    let exp = Experiment::assemble(config)?;
    ensure_dir(&exp.out_dir)?;
    let seed = config.seed;
    let classifier = load_model(&exp, seed)?;
    let (_, test) = exp.dataset(config, seed)?;
    let ids = rejected_individuals(&classifier, &test, config.sample_cap)?;

    let solver = config.solver.to_params();
    let attack = config.attack.to_params();

    struct Row {
        id: usize,
        found: bool,
        cost: f64,
        magnitude: f64,
        robust: bool,
    }

    let mut csv =
        CsvFile::new("config_hash,seed,epsilon,id,found,cost,attack_magnitude,robust");
    let mut summary =
        CsvFile::new("config_hash,seed,epsilon,n,n_found,pct_found,pct_robust_of_found,mean_cost_found");
    for &eps in &config.uncertainty.epsilons {
        let unc = UncertaintySpec::l2(eps)?;
        let rows: Vec<Row> = parallel_map(config.workers, &ids, |id| {
            let x = &test.features[id];
            match checked_recourse(
                &classifier,
                &exp.scm,
                x,
                &exp.feasibility,
                &unc,
                &exp.cost,
                &solver,
            )? {
                None => Ok(Row {
                    id,
                    found: false,
                    cost: f64::NAN,
                    magnitude: f64::NAN,
                    robust: false,
                }),
                Some((action, cost)) => {
                    let out =
                        attack_action(&classifier, &exp.scm, x, &action, &attack, mix_seed(seed, id))?;
                    // Not invalidated at all, or only beyond the ball.
                    let robust = !out.success || out.magnitude > eps;
                    Ok(Row {
                        id,
                        found: true,
                        cost,
                        magnitude: out.magnitude,
                        robust,
                    })
                }
            }
        })?;

        let n = rows.len();
        let found: Vec<&Row> = rows.iter().filter(|r| r.found).collect();
        let robust = found.iter().filter(|r| r.robust).count();
        let mean_cost = if found.is_empty() {
            f64::NAN
        } else {
            found.iter().map(|r| r.cost).sum::<f64>() / found.len() as f64
        };
        for r in &rows {
            csv.row(format!(
                "{},{},{},{},{},{},{},{}",
                exp.hash,
                seed,
                eps,
                r.id,
                u8::from(r.found),
                r.cost,
                r.magnitude,
                u8::from(r.robust)
            ));
        }
        summary.row(format!(
            "{},{},{},{},{},{},{},{}",
            exp.hash,
            seed,
            eps,
            n,
            found.len(),
            100.0 * found.len() as f64 / n as f64,
            if found.is_empty() {
                f64::NAN
            } else {
                100.0 * robust as f64 / found.len() as f64
            },
            mean_cost
        ));
    }
    csv.save(&exp.out_dir.join("robustness.csv"))?;
    summary.save(&exp.out_dir.join("robustness_summary.csv"))?;
    println!("robustness: wrote {}", exp.out_dir.display());
    Ok(())
}

pub fn cmd_regularizers(config: &ExperimentConfig) -> Result<()> {
    let exp = Experiment::assemble(config)?;
    ensure_dir(&exp.out_dir)?;
    let reg = &config.regularizers;
    let eps_reg = reg.allr_eps_reg.unwrap_or(config.robust_eps);

    let mut objectives: Vec<(String, Objective)> = vec![
        ("erm".into(), Objective::Erm),
        ("af".into(), Objective::Af),
        (
            "allr".into(),
            Objective::Allr {
                mu1: reg.allr_mu1,
                mu2: reg.allr_mu2,
                eps_reg,
            },
        ),
        (
            "ross".into(),
            Objective::Ross {
                mu: reg.ross_mu,
                steps: reg.ross_steps,
            },
        ),
    ];
    if reg.include_ablations {
        objectives.push((
            "allr-mu1-0".into(),
            Objective::Allr {
                mu1: 0.0,
                mu2: reg.allr_mu2,
                eps_reg,
            },
        ));
        objectives.push((
            "allr-mu2-0".into(),
            Objective::Allr {
                mu1: reg.allr_mu1,
                mu2: 0.0,
                eps_reg,
            },
        ));
    }

    let solver = config.solver.to_params();
    let standard = UncertaintySpec::none();
    let robust = UncertaintySpec::l2(config.robust_eps)?;

    struct Cell {
        accuracy: f64,
        mcc: f64,
        n: usize,
        found_standard: usize,
        robust_costs: BTreeMap<usize, f64>,
    }

    // (objective, seed) -> results.
    let mut cells: BTreeMap<(String, u64), Cell> = BTreeMap::new();
    let seed_list = seeds(config, 5);
    for (name, objective) in &objectives {
        for &seed in &seed_list {
            let (classifier, _, metrics) = exp.train_seed(config, objective.clone(), seed)?;
            let (_, test) = exp.dataset(config, seed)?;
            let ids = rejected_individuals(&classifier, &test, config.sample_cap)?;

            let per_individual: Vec<(usize, bool, Option<f64>)> =
                parallel_map(config.workers, &ids, |id| {
                    let x = &test.features[id];
                    let std_found = checked_recourse(
                        &classifier,
                        &exp.scm,
                        x,
                        &exp.feasibility,
                        &standard,
                        &exp.cost,
                        &solver,
                    )?
                    .is_some();
                    let robust_cost = checked_recourse(
                        &classifier,
                        &exp.scm,
                        x,
                        &exp.feasibility,
                        &robust,
                        &exp.cost,
                        &solver,
                    )?
                    .map(|(_, cost)| cost);
                    Ok((id, std_found, robust_cost))
                })?;

            let mut cell = Cell {
                accuracy: metrics.accuracy,
                mcc: metrics.mcc,
                n: per_individual.len(),
                found_standard: 0,
                robust_costs: BTreeMap::new(),
            };
            for (id, std_found, robust_cost) in per_individual {
                if std_found {
                    cell.found_standard += 1;
                }
                if let Some(cost) = robust_cost {
                    cell.robust_costs.insert(id, cost);
                }
            }
            cells.insert((name.clone(), seed), cell);
        }
    }

    // Mean robust cost over individuals solved by both ERM and the compared
    // objective, then normalized so the largest mean in the run is 1.
    let mut mean_common: BTreeMap<(String, u64), f64> = BTreeMap::new();
    for ((name, seed), cell) in &cells {
        let erm = &cells[&("erm".to_string(), *seed)];
        let common: Vec<f64> = cell
            .robust_costs
            .iter()
            .filter(|(id, _)| erm.robust_costs.contains_key(*id))
            .map(|(_, &c)| c)
            .collect();
        let mean = if common.is_empty() {
            f64::NAN
        } else {
            common.iter().sum::<f64>() / common.len() as f64
        };
        mean_common.insert((name.clone(), *seed), mean);
    }
    let max_mean = mean_common
        .values()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |a, &b| a.max(b));

    let mut csv = CsvFile::new(
        "config_hash,seed,objective,accuracy,mcc,pct_found_standard,pct_found_robust,mean_cost_common,relative_cost",
    );
    let mut aggregates: BTreeMap<String, Vec<[f64; 5]>> = BTreeMap::new();
    for (name, _) in &objectives {
        for &seed in &seed_list {
            let cell = &cells[&(name.clone(), seed)];
            let mean = mean_common[&(name.clone(), seed)];
            let relative = if mean.is_finite() && max_mean > 0.0 {
                mean / max_mean
            } else {
                f64::NAN
            };
            let pct_std = 100.0 * cell.found_standard as f64 / cell.n as f64;
            let pct_rob = 100.0 * cell.robust_costs.len() as f64 / cell.n as f64;
            csv.row(format!(
                "{},{},{},{},{},{},{},{},{}",
                exp.hash, seed, name, cell.accuracy, cell.mcc, pct_std, pct_rob, mean, relative
            ));
            aggregates.entry(name.clone()).or_default().push([
                cell.accuracy,
                cell.mcc,
                pct_std,
                pct_rob,
                relative,
            ]);
        }
    }
    csv.save(&exp.out_dir.join("regularizers.csv"))?;

    let mut summary = CsvFile::new(
        "config_hash,objective,mean_accuracy,mean_mcc,mean_pct_found_standard,mean_pct_found_robust,mean_relative_cost",
    );
    for (name, _) in &objectives {
        let rows = &aggregates[name];
        let mean = |k: usize| {
            let vals: Vec<f64> = rows.iter().map(|r| r[k]).filter(|v| v.is_finite()).collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        summary.row(format!(
            "{},{},{},{},{},{},{}",
            exp.hash,
            name,
            mean(0),
            mean(1),
            mean(2),
            mean(3),
            mean(4)
        ));
    }
    summary.save(&exp.out_dir.join("regularizers_summary.csv"))?;
    println!("regularizers: wrote {}", exp.out_dir.display());
    Ok(())
}

pub fn cmd_attack(
    config: &ExperimentConfig,
    row: usize,
    targets: &[usize],
    theta: &[f64],
) -> Result<()> {
    let exp = Experiment::assemble(config)?;
    ensure_dir(&exp.out_dir)?;
    let seed = config.seed;
    let classifier = load_model(&exp, seed)?;
    let (_, test) = exp.dataset(config, seed)?;
    if row >= test.n_rows() {
        bail!("row {row} out of range ({} test rows)", test.n_rows());
    }
    let x = &test.features[row];
    let action = RecourseAction::new(targets.to_vec(), theta.to_vec())?;
    let attack = config.attack.to_params();
    let out = attack_action(&classifier, &exp.scm, x, &action, &attack, mix_seed(seed, row))?;

    let mut csv = CsvFile::new(
        "config_hash,seed,row,targets,theta,attack_magnitude,attack_success,certified",
    );
    csv.row(format!(
        "{},{},{},{},{},{},{},{}",
        exp.hash,
        seed,
        row,
        join(targets, ";"),
        join(theta, ";"),
        out.magnitude,
        u8::from(out.success),
        u8::from(out.certified)
    ));
    csv.save(&exp.out_dir.join("attack.csv"))?;
    println!(
        "attack: magnitude {} (success {}, certified {})",
        out.magnitude, out.success, out.certified
    );
    Ok(())
}

pub fn cmd_recourse(config: &ExperimentConfig, row: usize, epsilon: f64) -> Result<()> {
    let exp = Experiment::assemble(config)?;
    ensure_dir(&exp.out_dir)?;
    let seed = config.seed;
    let classifier = load_model(&exp, seed)?;
    let (_, test) = exp.dataset(config, seed)?;
    if row >= test.n_rows() {
        bail!("row {row} out of range ({} test rows)", test.n_rows());
    }
    let x = &test.features[row];
    let unc = UncertaintySpec::l2(epsilon)?;
    let solver = config.solver.to_params();
    let result = checked_recourse(
        &classifier,
        &exp.scm,
        x,
        &exp.feasibility,
        &unc,
        &exp.cost,
        &solver,
    )?;

    let mut csv =
        CsvFile::new("config_hash,seed,row,epsilon,found,targets,theta,cost");
    match &result {
        Some((action, cost)) => {
            csv.row(format!(
                "{},{},{},{},1,{},{},{}",
                exp.hash,
                seed,
                row,
                epsilon,
                join(action.intervened(), ";"),
                join(action.theta(), ";"),
                cost
            ));
            println!(
                "recourse: shift features {:?} by {:?} (cost {})",
                action.intervened(),
                action.theta(),
                cost
            );
        }
        None => {
            csv.row(format!("{},{},{},{},0,,,", exp.hash, seed, row, epsilon));
            println!("recourse: not found at epsilon {epsilon}");
        }
    }
    csv.save(&exp.out_dir.join("recourse.csv"))?;
    Ok(())
}

fn join<T: std::fmt::Display>(items: &[T], sep: &str) -> String {
    items
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}
