//! Human-readable summary assembled from the JSON artifacts of earlier runs.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

const SOURCES: [&str; 6] = [
    "simulation.json",
    "ingest.json",
    "exposures.json",
    "fit.json",
    "permutation.json",
    "causal.json",
];

fn num(v: &Value) -> String {
    match v.as_f64() {
        Some(x) if x.abs() >= 1e4 || (x != 0.0 && x.abs() < 1e-3) => format!("{x:.3e}"),
        Some(x) => format!("{x:.4}"),
        None if v.is_null() => "-".into(),
        None => v.to_string(),
    }
}

fn text(v: &Value) -> String {
    v.as_str().map_or_else(|| v.to_string(), str::to_string)
}

fn section_ingest(s: &mut String, r: &Value) {
    let _ = writeln!(s, "Regions: {}, periods: {}, groups: {}\n", r["regions"], r["periods"].as_array().map_or(0, Vec::len), r["groups"]);
    let _ = writeln!(s, "| variable | n | mean | sd | min | max |\n|---|---|---|---|---|---|");
    for d in r["descriptives"].as_array().into_iter().flatten() {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            text(&d["variable"]),
            d["n"],
            num(&d["mean"]),
            num(&d["sd"]),
            num(&d["min"]),
            num(&d["max"])
        );
    }
}

fn section_fit(s: &mut String, r: &Value) {
    let f = &r["fit"];
    let _ = writeln!(s, "Model: {}, rows: {}, log-likelihood: {}, status: {}\n", text(&f["kind"]), r["n_rows"], num(&f["loglik"]), text(&f["convergence"]["status"]));
    let _ = writeln!(s, "| term | beta | se | robust se | z | p |\n|---|---|---|---|---|---|");
    let terms = f["terms"].as_array().cloned().unwrap_or_default();
    for (j, t) in terms.iter().enumerate() {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            text(t),
            num(&f["coefficients"][j]),
            num(&f["se"][j]),
            num(&f["robust_se"][j]),
            num(&f["z"][j]),
            num(&f["p"][j])
        );
    }
    let _ = writeln!(s, "| ln(alpha) | {} | {} | | | |", num(&f["ln_alpha"]), num(&f["ln_alpha_se"]));
    for v in f["variance_components"].as_array().into_iter().flatten() {
        let _ = writeln!(s, "| var({}) | {} | {} | | | |", text(&v["level"]), num(&v["sigma2"]), num(&v["se"]));
    }
}

fn section_permute(s: &mut String, r: &Value) {
    let _ = writeln!(s, "| predictor | observed MAAPE | proportion lower | failed | permutations |\n|---|---|---|---|---|");
    for p in r["reports"].as_array().into_iter().flatten() {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            text(&p["predictor"]),
            num(&p["observed_maape"]),
            num(&p["proportion_lower"]),
            p["n_failed"],
            p["n_permutations"]
        );
    }
}

fn section_causal(s: &mut String, r: &Value) {
    let _ = writeln!(s, "Treatment: {} (n = {})\n", text(&r["treatment"]), r["n"]);
    let _ = writeln!(s, "| method | estimate | se | z | p |\n|---|---|---|---|---|");
    for e in r["estimates"].as_array().into_iter().flatten() {
        let _ = writeln!(s, "| {} | {} | {} | {} | {} |", text(&e["method"]), num(&e["estimate"]), num(&e["se"]), num(&e["z"]), num(&e["p"]));
    }
    let _ = writeln!(s, "\n| weights | ESS | max abs balance | truncated |\n|---|---|---|---|");
    for w in r["weights"].as_array().into_iter().flatten() {
        let _ = writeln!(s, "| {} | {} | {} | {} |", text(&w["method"]), num(&w["ess"]), num(&w["max_abs_balance"]), w["n_truncated"]);
    }
}

/// Markdown summary of every artifact found in `out`.
pub(super) fn render(out: &Path) -> Result<String> {
    let mut s = String::from("# Run report\n");
    let mut found = 0;
    for name in SOURCES {
        let path = out.join(name);
        if !path.exists() {
            continue;
        }
        let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let v: Value = serde_json::from_str(&raw)?;
        found += 1;
        let r = &v["result"];
        let _ = writeln!(s, "\n## {} (seed {})\n", text(&v["command"]), v["seed"]);
        match name {
            "ingest.json" => section_ingest(&mut s, r),
            "fit.json" => section_fit(&mut s, r),
            "permutation.json" => section_permute(&mut s, r),
            "causal.json" => section_causal(&mut s, r),
            _ => {
                for (k, val) in r.as_object().into_iter().flatten() {
                    let _ = writeln!(s, "- {k}: {}", val);
                }
            }
        }
        let warnings = v["warnings"].as_array().cloned().unwrap_or_default();
        if !warnings.is_empty() {
            let _ = writeln!(s, "\nWarnings:");
            for w in warnings {
                let _ = writeln!(s, "- {}", text(&w));
            }
        }
    }
    if found == 0 {
        return Err(Error::InvalidData(format!("no artifacts to report in {}", out.display())));
    }
    Ok(s)
}
