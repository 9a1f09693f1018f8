use gridmesh_core::grid::{loads_by_id, GridModel};
use gridmesh_core::scenario::{run_scenario, ScenarioScript, TruthSeries};
use gridmesh_core::wire::{decode_frame, encode_frame, PmuDataFrame, Status};
use gridmesh_core::wls::{
    build_gain, linearize_pseudomeasurements, standard_configuration, Measurement, MeasurementSet, PseudoSigma,
    RelinearizeOptions, PMU_SIGMA,
};
use gridmesh_core::Complex64;

fn estimate_at(model: &GridModel, truth: &TruthSeries, script: &ScenarioScript, tick: u64) -> Vec<Complex64> {
    let variance = PMU_SIGMA * PMU_SIGMA;
    let loads = script.loads_at(model, truth.timestamp(tick).as_micros()).unwrap();
    let slots = standard_configuration(model, model.pmu_nodes(), variance, &model.loads(), PseudoSigma::default()).unwrap();
    let cache = build_gain(model, &slots).unwrap();

    let mut z = Vec::new();
    for &node in model.pmu_nodes() {
        let sample = truth.sample(tick, node).unwrap();
        let frame = PmuDataFrame {
            idcode: node as u16,
            timestamp: sample.timestamp,
            status: Status::OK,
            phasors: vec![sample.voltage; 3],
            freq: sample.freq,
            rocof: sample.rocof,
        };
        let decoded = decode_frame(&encode_frame(&frame).unwrap()).unwrap();
        z.push(Measurement::voltage(node, decoded.phasors[0].to_rect(), variance));
    }
    let pseudo: Vec<_> = model.nodes().iter().zip(&loads).skip(1).map(|(n, &s)| (n.id, s)).collect();
    let flat = vec![Complex64::new(1.0, 0.0); pseudo.len()];
    z.extend(linearize_pseudomeasurements(&pseudo, &flat, PseudoSigma::default()).unwrap());
    cache
        .estimate_relinearized(&MeasurementSet::new(z), &loads_by_id(model, &loads), RelinearizeOptions::default())
        .unwrap()
        .node_voltages
}

#[test]
fn decoded_frames_and_true_loads_recover_the_der_step() {
    let model = GridModel::ieee13_balanced();
    let script = ScenarioScript::der_insertion();
    let truth = run_scenario(&model, &script).unwrap();
    let idx = model.index_of(33).unwrap();
    for tick in [0, 1044, 1045, 1499] {
        let est = estimate_at(&model, &truth, &script, tick);
        let expected = truth.sample(tick, 33).unwrap().voltage.magnitude;
        // Only the f32 wire rounding of the PMU voltages separates the two.
        assert!((est[idx].norm() - expected).abs() < 1e-6, "tick {tick}");
    }
    let before = truth.sample(1044, 33).unwrap().voltage.magnitude;
    let after = truth.sample(1045, 33).unwrap().voltage.magnitude;
    assert!(after - before > 0.05);
}

#[test]
fn bundled_inputs_survive_their_file_formats() {
    let dir = tempfile::tempdir().unwrap();
    let model = GridModel::ieee13_balanced();
    model.save(dir.path().join("model.kv")).unwrap();
    assert_eq!(GridModel::load(dir.path().join("model.kv")).unwrap(), model);

    let script = ScenarioScript::der_insertion();
    std::fs::write(dir.path().join("scenario.kv"), script.to_kv_string()).unwrap();
    assert_eq!(ScenarioScript::load(dir.path().join("scenario.kv")).unwrap(), script);

    let mut short = script.clone();
    short.duration_s = 21.0;
    let truth = run_scenario(&model, &short).unwrap();
    let mut csv = Vec::new();
    truth.write_csv(&mut csv).unwrap();
    let reread = TruthSeries::read_csv(csv.as_slice()).unwrap();
    assert_eq!(reread.tick_count(), truth.tick_count());
    for tick in [0, 1044, 1045, 1049] {
        let (a, b) = (truth.sample(tick, 33).unwrap(), reread.sample(tick, 33).unwrap());
        assert_eq!(a.timestamp, b.timestamp);
        assert!((a.voltage.magnitude - b.voltage.magnitude).abs() < 1e-12);
    }
}
