use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sppo_core::exact_solver::{run_mwu, SolverConfig};
use sppo_core::losses::{
    dpo_loss, gradient_check, ipo_loss, kto_loss, sppo_objective, sppo_pairwise_loss,
    RegressionTarget,
};
use sppo_core::partition_lab::{rows_to_csv, run_lab, LabConfig, Regime};
use sppo_core::preference::WinRateEstimate;
use sppo_core::rng::DrawKey;
use sppo_core::selfplay::{
    compare_methods, k_ablation, reports_to_csv, run_selfplay, DatasetEntry, IterationReport,
    Method, PreferenceDataset, RunConfig, SelectionStrategy,
};
use sppo_core::token_mdp::{
    backup_consistency, optimal_token_policy, sequence_equivalence, soft_backup, sppo_token_loss,
    verify_value_identity, TokenMdp,
};
use sppo_core::{GameSpec, PromptId, SoftmaxPolicy, TabularPolicy};

#[derive(Parser)]
#[command(name = "sppo", version, about = "Self-play preference optimization lab")]
struct Cli {
    /// Seed for every random draw; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSV tables and summary.json.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Fixed,
    InvSqrt,
}

#[derive(Subcommand)]
enum Command {
    /// Exact multiplicative-weight self-play on a game file.
    SolveExact {
        game: PathBuf,
        /// Learning rate; with the inv-sqrt schedule this is the constant c in c/√T.
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long, default_value_t = 1000)]
        t_max: usize,
        #[arg(long, value_enum, default_value_t = Schedule::InvSqrt)]
        schedule: Schedule,
    },
    /// Iterative self-play from a run config.
    Selfplay { config: PathBuf },
    /// Pairwise win rates among policies produced by several methods.
    Compare {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "sppo,dpo,ipo")]
        methods: Vec<String>,
    },
    /// Self-play reruns over estimation batch sizes.
    AblateK {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,3,5")]
        k: Vec<usize>,
    },
    /// Normalizer limits in the disordered and ordered regimes.
    PartitionLab {
        #[arg(long, value_delimiter = ',', default_value = "disordered,ordered")]
        regime: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
        k_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        eta: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        seeds: u64,
    },
    /// Soft backup and identity checks on a token MDP spec.
    TokenMdp { spec: PathBuf },
    /// Finite-difference checks of every loss gradient on random inputs.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

/// Outputs of one subcommand: named CSV tables, a summary, and the list of
/// violated invariants.
struct Report {
    tables: Vec<(&'static str, String)>,
    summary: Value,
    violations: Vec<String>,
}

fn write_report(out: &Path, command: &str, report: &Report) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, body) in &report.tables {
        fs::write(out.join(name), body).with_context(|| format!("writing {name}"))?;
    }
    let summary = json!({
        "command": command,
        "ok": report.violations.is_empty(),
        "violations": report.violations,
        "results": report.summary,
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

fn load_run_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut config =
        RunConfig::load(path).with_context(|| format!("loading run config {}", path.display()))?;
    if let Some(s) = seed {
        config.settings.seed = s;
    }
    Ok(config)
}

fn check_reports(reports: &[IterationReport], violations: &mut Vec<String>) {
    for r in reports {
        for (name, v) in [
            ("win_rate_vs_prev", r.win_rate_vs_prev),
            ("win_rate_vs_first", r.win_rate_vs_first),
        ] {
            if !(0.0..=1.0).contains(&v) {
                violations.push(format!("iteration {}: {name} = {v} outside [0,1]", r.t));
            }
        }
        if r.kl_step < -1e-12 {
            violations.push(format!("iteration {}: negative KL {}", r.t, r.kl_step));
        }
    }
}

fn solve_exact(game: &Path, eta: f64, t_max: usize, schedule: Schedule) -> Result<Report> {
    let game = GameSpec::load(game).with_context(|| format!("loading game {}", game.display()))?;
    let config = match schedule {
        Schedule::Fixed => SolverConfig::fixed(eta, t_max),
        Schedule::InvSqrt => SolverConfig::inv_sqrt(eta, t_max),
    };
    config.validate()?;
    let pi_1 = TabularPolicy::uniform(&game.oracle.counts())?;
    let run = run_mwu(&pi_1, &game.oracle, &game.weights, &config)?;
    let min_residual = run.trace.min_residual();
    let mut violations = Vec::new();
    if min_residual < -1e-9 {
        violations.push(format!("regret inequality violated: residual {min_residual:e}"));
    }
    Ok(Report {
        tables: vec![
            ("gap_trace.csv", run.trace.to_csv()),
            ("mixture_policy.txt", run.mixture.materialize().to_snapshot_string()),
        ],
        summary: json!({
            "eta": run.eta,
            "t_max": t_max,
            "final_gap": run.trace.final_gap(),
            "min_regret_residual": min_residual,
        }),
        violations,
    })
}

fn selfplay(config: &Path, seed: Option<u64>) -> Result<Report> {
    let config = load_run_config(config, seed)?;
    let run = run_selfplay(&config)?;
    let mut violations = Vec::new();
    check_reports(&run.reports, &mut violations);
    Ok(Report {
        tables: vec![
            ("iterations.csv", reports_to_csv(&run.reports)),
            ("final_policy.txt", run.final_policy().to_snapshot_string()),
        ],
        summary: json!({
            "settings": config.settings,
            "reports": run.reports,
        }),
        violations,
    })
}

fn compare(config: &Path, seed: Option<u64>, methods: &[String]) -> Result<Report> {
    let config = load_run_config(config, seed)?;
    let methods = methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<sppo_core::Result<Vec<_>>>()?;
    let table = compare_methods(&config, &methods)?;
    let err = table.antisymmetry_error();
    let mut violations = Vec::new();
    if err > 1e-12 {
        violations.push(format!("win-rate table antisymmetry error {err:e}"));
    }
    Ok(Report {
        tables: vec![("comparison.csv", table.to_csv())],
        summary: json!({
            "labels": table.labels,
            "win_rates": table.win_rates,
            "antisymmetry_error": err,
        }),
        violations,
    })
}

fn ablate(config: &Path, seed: Option<u64>, ks: &[usize]) -> Result<Report> {
    let config = load_run_config(config, seed)?;
    let runs = k_ablation(&config, ks)?;
    let mut csv = String::new();
    let mut finals = Vec::new();
    let mut violations = Vec::new();
    for (k, run) in &runs {
        check_reports(&run.reports, &mut violations);
        for (i, line) in reports_to_csv(&run.reports).lines().enumerate() {
            if i == 0 {
                if csv.is_empty() {
                    csv.push_str(&format!("k,{line}\n"));
                }
            } else {
                csv.push_str(&format!("{k},{line}\n"));
            }
        }
        let last = run.reports.last().expect("at least one iteration");
        finals.push(json!({
            "k": k,
            "gap_mixture": last.gap_mixture,
            "gap_last": last.gap_last,
            "win_rate_vs_first": last.win_rate_vs_first,
        }));
    }
    Ok(Report {
        tables: vec![("ablation.csv", csv)],
        summary: json!({ "final": finals }),
        violations,
    })
}

fn partition_lab(
    regimes: &[String],
    k_list: &[usize],
    etas: &[f64],
    seeds: u64,
    seed: Option<u64>,
) -> Result<Report> {
    let config = LabConfig {
        regimes: regimes
            .iter()
            .map(|r| Regime::parse(r))
            .collect::<sppo_core::Result<Vec<_>>>()?,
        k_values: k_list.to_vec(),
        etas: etas.to_vec(),
        seeds,
        base_seed: seed.unwrap_or(0),
    };
    let (rows, summary) = run_lab(&config)?;
    let mut violations = Vec::new();
    if summary.worst_ordered_excess > 0.0 {
        violations.push(format!(
            "ordered log Z deviates from its limit by more than η/K (excess {:e})",
            summary.worst_ordered_excess
        ));
    }
    Ok(Report {
        tables: vec![("partition.csv", rows_to_csv(&rows))],
        summary: json!({ "config": config, "checks": summary }),
        violations,
    })
}

fn token_mdp(spec: &Path) -> Result<Report> {
    let mdp = TokenMdp::load(spec).with_context(|| format!("loading token MDP {}", spec.display()))?;
    let tables = soft_backup(&mdp);
    let star = optimal_token_policy(&mdp, &tables);
    let value_dev = verify_value_identity(&mdp, &tables);
    let seq_dev = sequence_equivalence(&mdp, &star)?;
    let consistency = backup_consistency(&mdp, &tables);
    let row_err = star.max_row_error();
    let mut violations = Vec::new();
    for (name, v, tol) in [
        ("value identity", value_dev, 1e-10),
        ("sequence factorization", seq_dev, 1e-10),
        ("backup consistency", consistency, 1e-12),
        ("row normalization", row_err, 1e-12),
    ] {
        if !(v < tol) {
            violations.push(format!("{name} deviation {v:e} exceeds {tol:e}"));
        }
    }
    let mut csv = String::from("depth,state,token,q,log_pi_star\n");
    for h in 0..mdp.horizon() {
        for s in 0..mdp.vocab().pow(h as u32) {
            for (a, (q, lp)) in tables.q(h, s).iter().zip(star.log_row(h, s)).enumerate() {
                csv.push_str(&format!("{h},{s},{a},{q},{lp}\n"));
            }
        }
    }
    Ok(Report {
        tables: vec![("token_policy.csv", csv)],
        summary: json!({
            "vocab": mdp.vocab(),
            "horizon": mdp.horizon(),
            "eta": mdp.eta(),
            "v_root": tables.v_root(),
            "value_identity_deviation": value_dev,
            "sequence_equivalence_deviation": seq_dev,
            "backup_consistency": consistency,
            "row_normalization_error": row_err,
        }),
        violations,
    })
}

/// Uniform draws in `[lo, hi)` keyed by `(seed, trial, slot)`.
struct Draws {
    seed: u64,
    trial: u64,
    next: u64,
}

impl Draws {
    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        let u = DrawKey::new(self.seed, self.trial, 0, self.next).uniform();
        self.next += 1;
        lo + (hi - lo) * u
    }

    fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(lo, hi)).collect()
    }
}

fn grad_check(trials: usize, tolerance: f64, seed: u64) -> Result<Report> {
    if trials == 0 {
        bail!("need at least one trial");
    }
    const EPS: f64 = 1e-5;
    let names = ["sppo_objective", "pairwise_sppo", "dpo", "ipo", "kto", "token_sppo"];
    let mut worst = [0.0f64; 6];
    let mut csv = String::from("trial,loss,max_relative_error\n");
    for trial in 0..trials {
        let mut d = Draws {
            seed,
            trial: trial as u64,
            next: 0,
        };
        let n = 2 + trial % 5;
        let pi_t = TabularPolicy::from_log_weights(vec![d.vec(n, -2.0, 2.0)])?;
        let entries = (0..4)
            .map(|_| DatasetEntry {
                prompt: PromptId(0),
                response: (d.range(0.0, n as f64) as usize).min(n - 1),
                win_rate: WinRateEstimate {
                    value: d.range(0.0, 1.0),
                    k: 1,
                    sample_ids: vec![0],
                },
            })
            .collect();
        let data = PreferenceDataset::new(entries, 1, SelectionStrategy::AllK)?;
        let target = RegressionTarget::constant(d.range(0.2, 3.0))?;
        let theta0 = d.vec(n, -2.0, 2.0);
        let (a, b, c, p) = (
            d.range(-3.0, 3.0),
            d.range(-3.0, 3.0),
            d.range(-2.0, 2.0),
            d.range(0.0, 1.0),
        );
        let mdp = TokenMdp::random(2 + trial % 2, 2 + trial % 2, d.range(0.3, 2.0), seed ^ trial as u64)?;
        let star = optimal_token_policy(&mdp, &soft_backup(&mdp));
        let logits = d.vec(star.log_probs().len(), -1.5, 1.5);
        let errs = [
            gradient_check(
                |v| {
                    let theta = SoftmaxPolicy::new(vec![v.to_vec()]).expect("finite logits");
                    let r = sppo_objective(&theta, &pi_t, &data, &target).expect("valid dataset");
                    (r.loss, r.grad.concat())
                },
                &theta0,
                EPS,
            )?,
            gradient_check(
                |v| {
                    let l = sppo_pairwise_loss(v[0], v[1], p);
                    (l.value, l.grad.to_vec())
                },
                &[a, b],
                EPS,
            )?,
            gradient_check(
                |v| {
                    let l = dpo_loss(v[0], v[1]);
                    (l.value, l.grad.to_vec())
                },
                &[a, b],
                EPS,
            )?,
            gradient_check(
                |v| {
                    let l = ipo_loss(v[0], v[1]);
                    (l.value, l.grad.to_vec())
                },
                &[a, b],
                EPS,
            )?,
            gradient_check(
                |v| {
                    let l = kto_loss(v[0], v[1], v[2]);
                    (l.value, l.grad.to_vec())
                },
                &[a, b, c],
                EPS,
            )?,
            gradient_check(
                |v| {
                    let r = sppo_token_loss(v, &mdp, &star).expect("matching shapes");
                    (r.loss, r.grad)
                },
                &logits,
                EPS,
            )?,
        ];
        for (i, e) in errs.iter().enumerate() {
            worst[i] = worst[i].max(*e);
            csv.push_str(&format!("{trial},{},{e}\n", names[i]));
        }
    }
    let violations = names
        .iter()
        .zip(&worst)
        .filter(|(_, w)| !(**w < tolerance))
        .map(|(n, w)| format!("{n}: max relative error {w:e} exceeds {tolerance:e}"))
        .collect();
    let summary: serde_json::Map<String, Value> = names
        .iter()
        .zip(&worst)
        .map(|(n, w)| (n.to_string(), json!(w)))
        .collect();
    Ok(Report {
        tables: vec![("grad_check.csv", csv)],
        summary: json!({ "trials": trials, "tolerance": tolerance, "max_relative_error": summary }),
        violations,
    })
}

fn run(cli: &Cli) -> Result<Report> {
    match &cli.command {
        Command::SolveExact {
            game,
            eta,
            t_max,
            schedule,
        } => solve_exact(game, *eta, *t_max, *schedule),
        Command::Selfplay { config } => selfplay(config, cli.seed),
        Command::Compare { config, methods } => compare(config, cli.seed, methods),
        Command::AblateK { config, k } => ablate(config, cli.seed, k),
        Command::PartitionLab {
            regime,
            k_list,
            eta,
            seeds,
        } => partition_lab(regime, k_list, eta, *seeds, cli.seed),
        Command::TokenMdp { spec } => token_mdp(spec),
        Command::GradCheck { trials, tolerance } => {
            grad_check(*trials, *tolerance, cli.seed.unwrap_or(0))
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::SolveExact { .. } => "solve-exact",
        Command::Selfplay { .. } => "selfplay",
        Command::Compare { .. } => "compare",
        Command::AblateK { .. } => "ablate-k",
        Command::PartitionLab { .. } => "partition-lab",
        Command::TokenMdp { .. } => "token-mdp",
        Command::GradCheck { .. } => "grad-check",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    let result = run(&cli).and_then(|report| {
        write_report(&cli.out, name, &report)?;
        Ok(report.violations)
    });
    match result {
        Ok(v) if v.is_empty() => {
            println!("{name}: ok, results in {}", cli.out.display());
            ExitCode::SUCCESS
        }
        Ok(v) => {
            for msg in &v {
                eprintln!("invariant violated: {msg}");
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
