use msf_core::eval::{extract_features, knn_classify, linear_probe, EvalPreprocess, EvalRow, Split};

use crate::config::RunConfig;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::rundir::{merge_eval_rows, RunLock};

use super::load_model;

/// Runs the requested protocols and returns the report rows.
pub fn cmd_eval(cfg: &RunConfig) -> CliResult<Vec<EvalRow>> {
    let data = dataset::load(&cfg.dataset)?;
    let e = &cfg.eval;
    if e.knn_k == 0 {
        return Err(CliError::usage("eval.knn_k must be at least 1"));
    }
    let side = match e.center_crop {
        0 => data.train.height().min(data.train.width()),
        c => c,
    };
    let model = load_model(cfg, &e.checkpoint, &data.train, side)?;
    let pre = EvalPreprocess { norm: model.norm, center_crop: (e.center_crop > 0).then_some(e.center_crop) };
    let backbone = model.pair.backbone();
    let train = extract_features(backbone, &data.train, &pre, Split::Train)?;
    let test = extract_features(backbone, &data.test, &pre, Split::Test)?;

    let mut rows = Vec::new();
    let mut shown = Vec::new();
    if e.which.nn() {
        for k in [1, e.knn_k] {
            let r = knn_classify(&train, &test, k, e.temperature)?;
            if r.clamped {
                eprintln!("warning: kNN k={k} clamped to the {} train samples", r.k);
            }
            let name = format!("nn{k}");
            shown.push(format!("{name}={:.2}", 100.0 * r.accuracy));
            rows.push(EvalRow::new(&name, Split::Test, Some(k), 100.0 * r.accuracy));
        }
    }
    if e.which.linear() {
        let classes = data.train.classes().max(data.test.classes());
        let r = linear_probe(&train, &test, &e.probe, classes)?;
        shown.push(format!("linear={:.2}", 100.0 * r.test_accuracy));
        rows.push(EvalRow::new("linear", Split::Test, None, 100.0 * r.test_accuracy));
        rows.push(EvalRow::new("linear", Split::Train, None, 100.0 * r.train_accuracy));
    }
    let dir = cfg.run_dir();
    let _lock = RunLock::acquire(&dir)?;
    let path = merge_eval_rows(&dir, &rows)?;
    println!("{} ({}; report {})", shown.join(", "), model.source, path.display());
    Ok(rows)
}
