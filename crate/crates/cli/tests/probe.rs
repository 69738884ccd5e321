//! Temporary diagnostic: watches the plain fusion variant learn, printing
//! loss components, score statistics, and AP at several thresholds.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use v2x_cli::commands::box_to_frame;
use v2x_core::detection::{decode_and_nms, DetectionHead};
use v2x_core::evaluation::{average_precision, region_filter, region_filter_detections, EvalRegion};
use v2x_core::geometry::Box3;
use v2x_core::nn::{AdamConfig, AdamState, ParamStore};
use v2x_core::perception::{run_pipeline, AgentFrameInput, ModalityMix, PipelineConfig, PipelineModel};
use v2x_core::scene::{build_scenario, ScenarioConfig};
use v2x_core::sensing::{lidar_pose, raycast_lidar, raycast_radar, LidarConfig, RadarConfig};
use v2x_core::training::{train_step, TrainConfig, TrainSample};

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

type Frame = (Vec<AgentFrameInput>, Vec<Box3>);

fn corpus() -> (Vec<Frame>, Vec<Frame>) {
    let mut scen = ScenarioConfig::default();
    scen.frames = 15;
    scen.agents = 3;
    scen.rsu = true;
    let mut lidar = LidarConfig::default();
    lidar.channels = 24;
    lidar.azimuth_step_deg = 0.75;
    let radar = RadarConfig::default();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in 0..4u64 {
        let scn = build_scenario(&scen, 0x7A11 + s).unwrap();
        for f in 0..scn.n_frames {
            let fr = scn.frame_ground_truth(f);
            let mut inputs = Vec::new();
            for a in 0..scn.agents.len() {
                let key = (s << 32) | ((f as u64) << 8) | a as u64;
                let lc = raycast_lidar(&scn, &fr, a, &lidar, mix(0x7A11, key ^ 0x4c49)).unwrap();
                let rc = raycast_radar(&scn, &fr, a, &radar, mix(0x7A11, key ^ 0x5241)).unwrap();
                let pose = lidar_pose(&scn, &fr, a);
                inputs.push(AgentFrameInput {
                    agent: a,
                    lidar: lc,
                    radar: rc,
                    lidar_height: pose.position.z,
                    reported_pose: pose,
                });
            }
            let ego = inputs[0].reported_pose;
            let gt: Vec<Box3> = fr.actors.iter().map(|x| box_to_frame(&x.bbox, &ego)).collect();
            if s < 3 {
                train.push((inputs, gt));
            } else {
                test.push((inputs, gt));
            }
        }
    }
    (train, test)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn watch_plain_fusion_learn() {
    let (train_frames, test_frames) = corpus();
    let samples: Vec<TrainSample> = train_frames
        .iter()
        .map(|(inputs, gt)| TrainSample { inputs: inputs.clone(), clean: None, gt: gt.clone() })
        .collect();
    println!("corpus: {} train frames, {} test", samples.len(), test_frames.len());

    for lr in [2e-3, 8e-3] {
        let mut cfg = PipelineConfig::default();
        cfg.grid.cell_size = 2.5;
        cfg.grid.channels = 4;
        cfg.modality = ModalityMix::LidarRadar;
        cfg.mdd = false;
        let mut store = ParamStore::new();
        let model = PipelineModel::build(&mut store, &cfg, mix(1, 0x4d4f)).unwrap();
        let head = DetectionHead::build(&mut store, cfg.grid.channels, "head", mix(1, 0x4845)).unwrap();
        let tcfg = TrainConfig {
            epochs: 60,
            adam: AdamConfig { lr, ..AdamConfig::default() },
            detection: Default::default(),
            denoising: Default::default(),
            seed: 1,
        };
        let mut opt = AdamState::for_store(&store);
        let region = EvalRegion::default();
        println!("--- lr {lr}");
        for epoch in 0..tcfg.epochs {
            let (mut cls, mut loc) = (0.0, 0.0);
            for (i, sample) in samples.iter().enumerate() {
                let seed = mix(tcfg.seed, ((epoch as u64) << 32) | i as u64);
                let loss = train_step(
                    sample, &cfg, &tcfg, &model, &head, &mut store, &mut opt, epoch as f64, seed,
                )
                .unwrap();
                cls += loss.cls;
                loc += loss.loc;
            }
            cls /= samples.len() as f64;
            loc /= samples.len() as f64;
            if (epoch + 1) % 10 == 0 {
                // Score stats over the test set, plus AP at three thresholds.
                let mut max_pos = f64::NEG_INFINITY;
                let mut max_all = f64::NEG_INFINITY;
                let mut dets_all: Vec<Vec<_>> = Vec::new();
                let mut gts_all = Vec::new();
                for (i, (inputs, gt)) in test_frames.iter().enumerate() {
                    let out = run_pipeline(inputs, &cfg, &model, &store, mix(0xE7A1, i as u64)).unwrap();
                    let (score, reg) = head.forward(&store, &out.fused.data).unwrap();
                    let logits = score.output();
                    for &z in logits.data() {
                        max_all = max_all.max(sigmoid(z));
                    }
                    // logit at each gt's cell
                    for b in gt {
                        if let Some((ix, iy)) = cfg.grid.cell_index(b.center.x, b.center.y) {
                            max_pos = max_pos.max(sigmoid(logits.at(0, 0, iy, ix)));
                        }
                    }
                    let dets = decode_and_nms(logits, reg.output(), &cfg.grid, 0.02, 0.2).unwrap();
                    dets_all.push(dets);
                    gts_all.push(region_filter(gt, &region));
                }
                let ap_at = |thresh: f64| {
                    let filtered: Vec<Vec<_>> = dets_all
                        .iter()
                        .map(|d| {
                            region_filter_detections(
                                &d.iter().filter(|x| x.score >= thresh).cloned().collect::<Vec<_>>(),
                                &region,
                            )
                        })
                        .collect();
                    average_precision(&filtered, &gts_all, 0.5).unwrap()
                };
                let mut rng = ChaCha12Rng::seed_from_u64(0);
                let _ = &mut rng;
                println!(
                    "epoch {:3}: cls {:.4} loc {:.4} | max score all {:.3} at-gt {:.3} | AP .02/.1/.3 = {:.3}/{:.3}/{:.3}",
                    epoch + 1, cls, loc, max_all, max_pos,
                    ap_at(0.02), ap_at(0.1), ap_at(0.3),
                );
            }
        }
    }
}
