//! Public API round trips: generate, export and import, fit, save and load,
//! forecast-error report.

use ipdm_core::control::RunControl;
use ipdm_core::synth::{self, SynthConfig};
use ipdm_core::train::{self, FitOptions, ModelParams};
use ipdm_core::verify;

fn small() -> SynthConfig {
    SynthConfig { time_span: 30, n_series: 120, n_inspectors: 6, seed: 3, ..SynthConfig::default() }
}

#[test]
fn export_import_keeps_ratings() {
    let ds = synth::generate(&small(), &RunControl::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    synth::export(&ds, dir.path()).unwrap();
    let back = synth::import(dir.path()).unwrap();
    // Shortest round-trip float formatting makes the ratings exact.
    assert_eq!(back.dataset, ds.dataset);
}

#[test]
fn fit_then_report() {
    let cfg = small();
    let ds = synth::generate(&cfg, &RunControl::new()).unwrap();
    let p0 = ModelParams { scale: cfg.scale, ..ModelParams::default() };
    let fit = train::fit(&p0, &ds.dataset, &FitOptions { max_iter: 4, ..FitOptions::default() }).unwrap();
    assert!(fit.train_loglik.windows(2).all(|w| w[1] >= w[0]));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(train::params_file_name("all"));
    train::save_params(&path, &fit.params).unwrap();
    let loaded = train::load_params(&path).unwrap();
    assert_eq!(train::params_to_json(&loaded).unwrap(), train::params_to_json(&fit.params).unwrap());

    let rep = verify::forecast_error_report(&ds, &loaded, 5, 50, 3, &RunControl::new()).unwrap();
    assert_eq!(rep.signed.cells.len(), 15);
    for c in &rep.absolute.cells {
        assert!(c.mae >= 0.0 && c.band_low <= c.band_high);
    }
    let csv = dir.path().join("report.csv");
    std::fs::write(&csv, verify::report_csv(&csv, &rep.signed).unwrap()).unwrap();
    let cells = verify::read_report_csv(&csv).unwrap();
    assert_eq!(cells.len(), rep.signed.cells.len());
    for (a, b) in cells.iter().zip(&rep.signed.cells) {
        assert_eq!((a.component.as_str(), a.horizon_year, a.n), (b.component.as_str(), b.horizon_year, b.n));
        assert!((a.mean_error - b.mean_error).abs() <= 1e-9 * (1.0 + b.mean_error.abs()));
    }
}
