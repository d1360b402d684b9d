//! Merge eval results from run directories into one Markdown + JSON report.

use std::fs;
use std::path::{Path, PathBuf};

use ctxasr_core::error::{Error, Result};
use ctxasr_core::nn::lora_param_count;

use crate::evalrun::EvalResult;

fn collect_results(run: &Path) -> Result<Vec<(PathBuf, EvalResult)>> {
    let eval_dir = run.join("eval");
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(&eval_dir) {
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
            .collect();
        paths.sort();
        for p in paths {
            let result: EvalResult = serde_json::from_str(&fs::read_to_string(&p)?)?;
            out.push((p, result));
        }
    }
    Ok(out)
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows: Vec<(String, EvalResult)> = Vec::new();
    for run in runs {
        for (_, result) in collect_results(run)? {
            rows.push((run.display().to_string(), result));
        }
    }
    if rows.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no eval results under {:?}; run `ctxasr eval` first",
            runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>()
        )));
    }

    let mut md = String::new();
    md.push_str("# Evaluation report\n\n");
    md.push_str("| run | model | context-train | context-eval | condition | WER | SUB | INS | DEL | RareWER |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for (run, r) in &rows {
        let denom = r.n_ref_words.max(1) as f64;
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {} |\n",
            run,
            r.variant,
            r.context_train,
            r.context_eval,
            r.condition,
            100.0 * r.wer,
            100.0 * r.sub as f64 / denom,
            100.0 * r.ins as f64 / denom,
            100.0 * r.del as f64 / denom,
            r.rare_wer.map_or("n/a".to_string(), |w| format!("{:.2}", 100.0 * w)),
        ));
    }
    md.push_str(&format!(
        "\nAdapter parameter formula: 4 projections x layers x 2 x width x rank; \
         at width 4096, 32 layers, rank 32 that is {} trainable adapter parameters.\n",
        lora_param_count(32, 4096, 32, 4)
    ));

    let json: Vec<&EvalResult> = rows.iter().map(|(_, r)| r).collect();
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, &md)?;
    let json_path = out.with_extension("json");
    fs::write(&json_path, serde_json::to_string_pretty(&json)?)?;
    println!("wrote {} and {}", out.display(), json_path.display());
    Ok(())
}
