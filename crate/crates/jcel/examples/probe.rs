// scratch probe: criterion 6 per-trial ratios, OMP floor at L=32, multiBS gain NMSE
use jcel::ep::{jcel_run, Extractor, JcelOptions, ScenePrior};
use jcel::harness::{
    dbm_to_watts, run_scheme, scheme_scene, ExperimentConfig, SweepConfig, SweepVariable,
};
use jcel::scene::OfdmParams;
use jcel::waveform::{pilot_matrix, simulate_rx, stack_channel, Dims};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    // --- criterion 6, per-trial ratio reading ---------------------------
    let ofdm = OfdmParams {
        carrier_freq: 28e9,
        bandwidth: 100e6,
        num_subcarriers: 32,
        cp_len: 16,
    };
    for p_dbm in [4.0, 8.0, 12.0] {
        let tx = dbm_to_watts(p_dbm);
        let scene = scheme_scene(4, ofdm, tx, 0.0).unwrap();
        let channel = scene.channel_tensor().unwrap();
        let dims = Dims {
            waveguides: scene.waveguides.len(),
            users: scene.num_users(),
            frames: 8,
            subcarriers: ofdm.num_subcarriers,
        };
        let pilots = pilot_matrix(dims.users, dims.frames, tx).unwrap();
        let truth = stack_channel(&channel, &dims);
        let prior = ScenePrior::from_scene(&scene);
        let mut ratios = Vec::new();
        for t in 0..20u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(900 + t);
            let obs = simulate_rx(&channel, &pilots, 1e-12, &mut rng).unwrap();
            let options = JcelOptions {
                truth: Some(truth.clone()),
                ..JcelOptions::default()
            };
            let run = jcel_run(&obs, &prior, &options).unwrap();
            let tr: Vec<f64> = run.trace.iter().map(|r| r.nmse_db.unwrap()).collect();
            let at6 = tr[5.min(tr.len() - 1)];
            let fin = *tr.last().unwrap();
            ratios.push(10f64.powf((at6 - fin) / 10.0));
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "C6 P={p_dbm}: per-trial it6/final linear ratios min {:.3} median {:.3} max {:.3} (need median <= 1.1)",
            ratios[0],
            ratios[ratios.len() / 2],
            ratios[ratios.len() - 1]
        );
    }

    // --- OMP floor at L=32 ----------------------------------------------
    let mut cfg = ExperimentConfig::scheme_default(1).unwrap();
    cfg.extractor = Extractor::Omp;
    cfg.sweep = SweepConfig {
        variable: SweepVariable::TxPowerDbm,
        values: vec![8.0, 12.0, 16.0],
    };
    let rows = run_scheme(&cfg).unwrap();
    for r in &rows {
        println!(
            "OMP L=32 P={}: nmse_h {:.2} nmse_z {:.2} nmse_pos {:.2} failed {}",
            r.sweep_value, r.nmse_h_db, r.nmse_z_db, r.nmse_pos_db, r.failed_trials
        );
    }

    // --- multiBS gain NMSE -----------------------------------------------
    let mut cfg = ExperimentConfig::scheme_default(1).unwrap();
    cfg.baseline = jcel::harness::Baseline::MultiBs;
    cfg.sweep = SweepConfig {
        variable: SweepVariable::TxPowerDbm,
        values: vec![8.0],
    };
    let rows = run_scheme(&cfg).unwrap();
    println!(
        "multiBS P=8: nmse_h {:.2} nmse_z {:.2} nmse_pos {:.2} (crlb h {:.2} z {:.2} pos {:.2})",
        rows[0].nmse_h_db,
        rows[0].nmse_z_db,
        rows[0].nmse_pos_db,
        rows[0].crlb_h_db,
        rows[0].crlb_z_db,
        rows[0].crlb_pos_db
    );
}
