//! Consolidated markdown report and plot-ready CSVs from prior stage outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rocktoken::detect::{Category, DetectionReport};
use rocktoken::gradgeom::{Group, PersistenceTest};
use rocktoken::knockout::{KnockoutCategory, PREDICTORS};
use rocktoken::numeric::{mean, median, quantile_sorted};
use rocktoken::trace::TokenId;

use crate::error::CliError;
use crate::run::Stage;
use crate::stages::{
    csv_field, fig4_csv, fig5_csv, read_json, GradgeomOutput, KnockoutOutput, MaskSummary, SweepOutput, TrainSummary,
};

pub const SECTIONS: [&str; 8] = [
    "Detection",
    "Density",
    "Cutoff",
    "Gradient geometry",
    "Persistence",
    "Knockout census",
    "Predictors",
    "Reweighting",
];

fn opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn absent(out: &mut String, stage: &str) {
    let _ = writeln!(out, "_Absent: no `{stage}` stage output in this run._\n");
}

/// Loads an optional stage output, registering it as an input when present.
fn optional<T: for<'de> serde::Deserialize<'de>>(stage: &mut Stage, path: PathBuf) -> Result<Option<T>, CliError> {
    if path.is_file() {
        stage.input(&path)?;
        read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn report(stage: &mut Stage) -> Result<Option<u64>, CliError> {
    let det_path = stage.prior("detect", "report.json");
    if !det_path.is_file() {
        return Err(CliError::Io(format!(
            "report needs the detect stage output: {} not found",
            det_path.display()
        )));
    }
    stage.input(&det_path)?;
    let det: DetectionReport = read_json(&det_path)?;
    let sweep: Option<SweepOutput> = optional(stage, stage.prior("sweep", "sweep.json"))?;
    let grad: Option<GradgeomOutput> = optional(stage, stage.prior("gradgeom", "gradgeom.json"))?;
    let ko: Option<KnockoutOutput> = optional(stage, stage.prior("knockout", "knockout.json"))?;
    let mask: Option<MaskSummary> = optional(stage, stage.prior("mask", "summary.json"))?;
    let train: Option<TrainSummary> = optional(stage, stage.prior("train", "summary.json"))?;

    let surfaces: BTreeMap<TokenId, String> = det.tokens.iter().map(|a| (a.token_id, a.surface.clone())).collect();
    let surface = |t: TokenId| surfaces.get(&t).cloned().unwrap_or_default();
    let mut md = String::from("# Rock token report\n\n");

    // Detection
    let _ = writeln!(md, "## {}\n", SECTIONS[0]);
    let _ = writeln!(
        md,
        "Thresholds: τ_pre = {:.6}, τ_post = {:.6}; radius w = {}, γ = {}, η = {}.\n",
        det.tau_pre_resolved, det.tau_post_resolved, det.config.w, det.config.gamma, det.config.eta
    );
    let _ = writeln!(md, "Rock set ({} tokens):\n", det.rock_set.len());
    md.push_str("| token | surface | category | freq | R | CCR | R_ctx |\n|---|---|---|---|---|---|---|\n");
    let rocks = det.rock_set();
    for a in det.tokens.iter().filter(|a| rocks.contains(&a.token_id)) {
        let _ = writeln!(
            md,
            "| {} | `{}` | {} | {} | {:.4} | {:.4} | {:.4} |",
            a.token_id,
            a.surface.replace('|', "\\|"),
            a.category.as_str(),
            a.freq,
            a.rock_score,
            a.ccr,
            a.rock_score_ctx
        );
    }
    let mut by_cat: BTreeMap<Category, usize> = BTreeMap::new();
    for a in det.tokens.iter().filter(|a| rocks.contains(&a.token_id)) {
        *by_cat.entry(a.category).or_default() += 1;
    }
    md.push_str("\nCategories: ");
    let cats: Vec<String> = by_cat.iter().map(|(c, n)| format!("{} {n}", c.as_str())).collect();
    md.push_str(&if cats.is_empty() { "none".into() } else { cats.join(", ") });
    md.push_str("\n\n");

    // Density
    let _ = writeln!(md, "## {}\n", SECTIONS[1]);
    let mut d: Vec<f64> = det.densities.iter().map(|x| x.density).collect();
    d.sort_by(f64::total_cmp);
    let _ = writeln!(
        md,
        "{} trajectories; median density {:.4}, mean {}, p10 {}, p90 {}.\n",
        d.len(),
        det.median_density,
        opt(mean(&d)),
        opt(quantile_sorted(&d, 0.1)),
        opt(quantile_sorted(&d, 0.9))
    );
    let mut fig2 = String::from("trajectory_id,length,rock_positions,density\n");
    for x in &det.densities {
        let _ = writeln!(fig2, "{},{},{},{}", x.trajectory_id, x.length, x.rock_positions, x.density);
    }
    stage.write("fig2_density.csv", fig2)?;

    // Cutoff
    let _ = writeln!(md, "## {}\n", SECTIONS[2]);
    match &sweep {
        Some(s) => {
            let c = &s.choice;
            let _ = writeln!(
                md,
                "Chosen K = {} (mean Jaccard {:.4} ≥ {}, coverage {:.4} ≥ {}){}.\n",
                c.k,
                c.mean_jaccard,
                c.min_jaccard,
                c.coverage,
                c.min_coverage,
                if c.fallback { "; no K met both floors, scalarized fallback used" } else { "" }
            );
            let _ = writeln!(
                md,
                "Subsample sizes {:?}, {} repeats.\n",
                s.result.sizes, s.result.repeats
            );
            let mut csv = String::from("k,mean_jaccard,coverage\n");
            for ((k, j), cov) in s.result.ks.iter().zip(s.result.mean_jaccard()).zip(&s.result.coverage_curve) {
                let _ = writeln!(csv, "{k},{j},{cov}");
            }
            stage.write("cutoff.csv", csv)?;
        }
        None => absent(&mut md, "sweep"),
    }

    // Gradient geometry
    let _ = writeln!(md, "## {}\n", SECTIONS[3]);
    match &grad {
        Some(g) => {
            let _ = writeln!(
                md,
                "Checkpoint `{}`; ‖G_balanced‖ = {:.6}; total contribution {:.6}.\n",
                g.gradients.checkpoint,
                g.gradients.balanced_norm,
                g.gradients.total_contribution()
            );
            md.push_str("| group | tokens | median norm | median cos |\n|---|---|---|---|\n");
            for grp in Group::ALL {
                let m: Vec<_> = g.gradients.tokens.iter().filter(|t| t.group == grp).collect();
                let norms: Vec<f64> = m.iter().map(|t| t.norm).collect();
                let cos: Vec<f64> = m.iter().filter_map(|t| t.cos_balanced).collect();
                let _ = writeln!(md, "| {} | {} | {} | {} |", grp.as_str(), m.len(), opt(median(&norms)), opt(median(&cos)));
            }
            md.push('\n');
            for c in &g.comparisons {
                match (&c.result, &c.error) {
                    (Some(r), _) => {
                        let _ = writeln!(
                            md,
                            "- {} vs {}: Mann-Whitney U = {:.1}, p = {:.4e}",
                            c.group_a.as_str(),
                            c.group_b.as_str(),
                            r.mann_whitney.statistic,
                            r.mann_whitney.p
                        );
                    }
                    (None, e) => {
                        let _ = writeln!(
                            md,
                            "- {} vs {}: not computed ({})",
                            c.group_a.as_str(),
                            c.group_b.as_str(),
                            e.as_deref().unwrap_or("unknown")
                        );
                    }
                }
            }
            md.push('\n');
            let mut csv = String::from("token_id,surface,group,n_occurrences,norm,cos_balanced,contribution\n");
            for t in &g.gradients.tokens {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    t.token_id,
                    csv_field(&surface(t.token_id)),
                    t.group.as_str(),
                    t.n_occurrences,
                    t.norm,
                    t.cos_balanced.map_or(String::new(), |x| x.to_string()),
                    t.contribution.map_or(String::new(), |x| x.to_string())
                );
            }
            stage.write("fig3_gradients.csv", csv)?;
        }
        None => absent(&mut md, "gradgeom"),
    }

    // Persistence
    let _ = writeln!(md, "## {}\n", SECTIONS[4]);
    match &grad {
        Some(g) => {
            let p = &g.persistence;
            let _ = writeln!(md, "Mean per-token KL at `{}` vs `{}`.\n", p.early, p.late);
            md.push_str("| group | tokens | median early | median late | median rel. reduction | Wilcoxon p |\n|---|---|---|---|---|---|\n");
            for gp in &p.groups {
                let test = match &gp.test {
                    PersistenceTest::Wilcoxon(t) => format!("{:.4e}", t.p_two_sided),
                    PersistenceTest::NoChange => "no change".into(),
                };
                let _ = writeln!(
                    md,
                    "| {} | {} | {:.4} | {:.4} | {} | {} |",
                    gp.group.as_str(),
                    gp.n_tokens,
                    gp.median_kl_early,
                    gp.median_kl_late,
                    opt(gp.median_relative_reduction),
                    test
                );
            }
            if !p.skipped.is_empty() {
                let s: Vec<&str> = p.skipped.iter().map(|g| g.as_str()).collect();
                let _ = writeln!(md, "\nGroups with fewer than three tokens: {}.", s.join(", "));
            }
            md.push('\n');
            let mut csv = String::from("token_id,surface,group,kl_early,kl_late,delta\n");
            for r in &p.records {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    r.token_id,
                    csv_field(&surface(r.token_id)),
                    r.group.as_str(),
                    r.kl_early,
                    r.kl_late,
                    r.delta_kl
                );
            }
            stage.write("fig3_persistence.csv", csv)?;
        }
        None => absent(&mut md, "gradgeom"),
    }

    // Knockout census
    let _ = writeln!(md, "## {}\n", SECTIONS[5]);
    match &ko {
        Some(k) => {
            let c = &k.census;
            let _ = writeln!(
                md,
                "{} candidates, the top tokens by R_ctx; core K = {} (from {}); baseline accuracy {:.4}.\n",
                c.n_candidates,
                k.selection.core_k,
                k.selection.core_k_source,
                c.baseline_accuracy
            );
            md.push_str("| category | count | fraction |\n|---|---|---|\n");
            for cc in &c.categories {
                let _ = writeln!(md, "| {} | {} | {:.4} |", cc.category.as_str(), cc.count, cc.fraction);
            }
            let _ = writeln!(
                md,
                "\nSign split of strong candidates: {} negative / {} positive, exact binomial p = {:.6}.",
                c.sign_split.negatives, c.sign_split.positives, c.sign_split.p_value
            );
            let _ = writeln!(
                md,
                "Stable core ({} candidates): {} / {}, p = {:.6}.",
                c.core_size, c.stable_core.negatives, c.stable_core.positives, c.stable_core.p_value
            );
            let _ = writeln!(
                md,
                "Bonferroni (threshold {:.3e}): {} rejections; Benjamini-Hochberg (q = {}): {} rejections.",
                c.bonferroni.threshold_or_level,
                c.bonferroni.rejected.len(),
                c.benjamini_hochberg.threshold_or_level,
                c.benjamini_hochberg.rejected.len()
            );
            if let Some(n) = &k.null_calibration {
                let _ = writeln!(
                    md,
                    "Null calibration: {} of {} phantom knockouts strong pillar (rate {:.4}), {} strong stumbling.",
                    n.strong_pillars, n.candidates, n.pillar_rate, n.strong_stumbling
                );
            }
            let pillars: Vec<String> = k
                .records
                .iter()
                .filter(|r| r.category == Some(KnockoutCategory::StrongPillar))
                .map(|r| format!("{} `{}` (Δ {:.4})", r.candidate, surface(r.candidate), r.deciding_delta()))
                .collect();
            let _ = writeln!(
                md,
                "Strong pillars: {}.\n",
                if pillars.is_empty() { "none".into() } else { pillars.join(", ") }
            );
            stage.write("fig4_knockout.csv", fig4_csv(&k.records, &surface))?;
        }
        None => absent(&mut md, "knockout"),
    }

    // Predictors
    let _ = writeln!(md, "## {}\n", SECTIONS[6]);
    match &ko {
        Some(k) if !k.census.correlations.is_empty() => {
            md.push_str("| predictor | r | p |\n|---|---|---|\n");
            for row in &k.census.correlations {
                match &row.error {
                    Some(e) => {
                        let _ = writeln!(md, "| {} | n/a | {} |", row.predictor, e);
                    }
                    None => {
                        let _ = writeln!(md, "| {} | {} | {} |", row.predictor, opt(row.r), opt(row.p));
                    }
                }
            }
            let max_abs = k.census.correlations.iter().filter_map(|r| r.r).map(f64::abs).fold(None, |m: Option<f64>, x| {
                Some(m.map_or(x, |m| m.max(x)))
            });
            let _ = writeln!(md, "\nLargest |r| = {}.\n", opt(max_abs));
            if let Some(points) = &k.predictor_points {
                stage.write("fig5_predictors.csv", fig5_csv(points))?;
            }
        }
        Some(k) => {
            let _ = writeln!(
                md,
                "_Not computed: {}._\n",
                k.predictor_note.as_deref().unwrap_or("no predictor table")
            );
        }
        None => absent(&mut md, "knockout"),
    }
    debug_assert_eq!(PREDICTORS.len(), 9);

    // Reweighting
    let _ = writeln!(md, "## {}\n", SECTIONS[7]);
    match &mask {
        Some(m) => {
            let _ = writeln!(
                md,
                "Regime {} with λ = {}, radius {}: {} windows cover {} of {} positions; masked fraction {:.4}.",
                m.regime.as_str(),
                m.lambda,
                m.radius,
                m.windows,
                m.covered_positions,
                m.total_positions,
                m.masked_fraction
            );
            let _ = writeln!(
                md,
                "Loss at `{}`: plain {:.6}, weighted {:.6}; active terms {} of {}.\n",
                m.checkpoint, m.plain_loss, m.weighted_loss, m.active_terms, m.total_positions
            );
        }
        None => absent(&mut md, "mask"),
    }
    if let Some(t) = &train {
        let _ = writeln!(
            md,
            "Training ({:?} source, {} regime, λ = {}): {} steps, active terms {} of {} ({:.4}); mean KL {:.6} → {:.6}.",
            t.source,
            t.regime.as_str(),
            t.lambda,
            t.steps,
            t.total_active_terms,
            t.total_positions,
            t.active_fraction,
            t.initial_mean_kl,
            t.final_mean_kl
        );
        let planted: Vec<String> = t.planted_median_kl.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        let _ = writeln!(md, "Median planted-token KL by checkpoint: {}.\n", planted.join(", "));
    }

    stage.write("report.md", md)?;
    Ok(None)
}
