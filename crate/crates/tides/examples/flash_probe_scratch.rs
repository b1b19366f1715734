// scratch (deleted before final)
use tides::flash::*;

fn main() {
    for kind in ToyKind::ALL {
        let trained = train_toy(kind, 0, TrainSettings::default()).unwrap();
        let predictor = |seqs: &[FlashSequence]| trained.model.predict(&trained.store, seqs);
        let report = evaluate_grid(&predictor, 0).unwrap();
        let r01 = report.rel_error_at(0.1).unwrap();
        let r10 = report.rel_error_at(1.0).unwrap();
        let r20 = report.rel_error_at(2.0).unwrap();
        println!(
            "{:8}: loss {:.2e} | mean {:6.2}% | 0.1:{:6.2}% 1.0:{:5.2}% 2.0:{:6.2}% | ratios {:5.2} {:4.2}",
            kind.name(), trained.loss_curve.last().unwrap(), report.mean_rel_error(),
            r01, r10, r20, r01 / r10, r20 / r10
        );
    }
}
