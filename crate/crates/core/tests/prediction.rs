mod common;

use common::{linear_gaussian_trace, small_config, untrained_like, LinearGaussian};
use cutoff_core::predictor::{one_step_forecasts, EntryFlag, Predictor};
use cutoff_core::trace::RuntimeTrace;
use cutoff_core::trainer::{train, ModelCheckpoint};

const AR: LinearGaussian = LinearGaussian {
    m0: 0.0,
    s0: 0.3,
    a: 0.9,
    q: 0.130_766_968_306_808_1,
    b: 1.0,
    r: 0.3,
};

const LAG: usize = 5;

fn ar_trace() -> RuntimeTrace {
    linear_gaussian_trace(&AR, 2.0, 800, 11)
}

fn mean_log_density(ckpt: &ModelCheckpoint, trace: &RuntimeTrace, range: std::ops::Range<usize>) -> f64 {
    let p = Predictor::new(ckpt.clone()).unwrap();
    let mut total = 0.0;
    for t in range.clone() {
        let mut buf = p.new_buffer();
        for row in &trace.rows()[t - LAG..t] {
            buf.push(row.clone(), vec![EntryFlag::Observed; row.len()]).unwrap();
        }
        let pred = p.predict_next(&buf, 200, t as u64).unwrap();
        total += pred.log_density(trace.row(t).unwrap()).unwrap();
    }
    total / range.len() as f64
}

#[test]
fn training_raises_held_out_predictive_density_and_beats_carry_forward() {
    let trace = ar_trace();
    let cfg = small_config(LAG, 6, 1);
    let ckpt = train(&trace.slice(0, 600).unwrap(), &cfg).unwrap();
    let before = mean_log_density(&untrained_like(&ckpt, &cfg), &trace, 600..800);
    let after = mean_log_density(&ckpt, &trace, 600..800);
    assert!(after > before, "{after} <= {before}");

    let history = &ckpt.meta.elbo_history;
    let head = history[..20].iter().sum::<f64>() / 20.0;
    let tail = history[history.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail > head, "ELBO fell from {head} to {tail}");

    let report = one_step_forecasts(&Predictor::new(ckpt).unwrap(), &trace, 600, 800, 200, 3).unwrap();
    assert_eq!(report.steps.len(), 200);
    assert!(
        report.rmse_model <= report.rmse_carry_forward,
        "{} > {}",
        report.rmse_model,
        report.rmse_carry_forward
    );
}

#[test]
fn constant_runtimes_are_predicted_within_two_percent() {
    let trace = RuntimeTrace::new(3, vec![vec![1.5, 1.5, 1.5]; 300]).unwrap();
    let ckpt = train(&trace, &small_config(LAG, 8, 2)).unwrap();
    let p = Predictor::new(ckpt).unwrap();
    let mut buf = p.new_buffer();
    for _ in 0..LAG {
        buf.push(vec![1.5; 3], vec![EntryFlag::Observed; 3]).unwrap();
    }
    let pred = p.predict_next(&buf, 500, 4).unwrap();
    for (j, m) in pred.mean_seconds().iter().enumerate() {
        assert!((m - 1.5).abs() <= 0.02 * 1.5, "worker {j}: {m}");
    }
}

#[test]
fn predictive_mean_error_shrinks_as_inverse_root_k() {
    let trace = ar_trace();
    let cfg = small_config(LAG, 0, 5);
    let ckpt =
        ModelCheckpoint::untrained(&cfg, 1, cutoff_core::trace::fit_normalization(&trace, LAG).unwrap()).unwrap();
    let p = Predictor::new(ckpt).unwrap();
    let mut buf = p.new_buffer();
    for row in &trace.rows()[..LAG] {
        buf.push(row.clone(), vec![EntryFlag::Observed]).unwrap();
    }
    let spread = |k: usize| {
        let means: Vec<f64> = (0..200u64)
            .map(|s| {
                let pred = p.predict_next(&buf, k, s).unwrap();
                pred.samples.iter().map(|x| x[0]).sum::<f64>() / k as f64
            })
            .collect();
        let mu = means.iter().sum::<f64>() / means.len() as f64;
        (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
    };
    let ratio = spread(10) / spread(1000);
    // sqrt(1000 / 10) = 10; the spread of 200 replicates is known to ~5%.
    assert!((8.0..12.5).contains(&ratio), "{ratio}");
}
