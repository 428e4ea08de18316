//! Regenerates the checked-in corpus seeds from the real serializers, so the
//! fuzzers start from well-formed inputs. Run from the fuzz directory:
//! `cargo run --example gen_seeds`.

use std::fs;
use std::path::Path;

use crt6d::geometry::{pose_to_json, Pose};
use crt6d::metrics::{instances_to_jsonl, InstanceRecord};
use crt6d::pyramid::{pyramid_to_bytes, FeaturePyramid};
use crt6d::refiner::{checkpoint_to_bytes, ParamStore, RefinerConfig};
use crt6d::synth::{demo_object_model, generate_scene, SceneConfig};
use crt6d::tensor::Tensor;
use nalgebra::{Matrix3, Vector3};

fn write(target: &str, name: &str, bytes: &[u8]) {
    let dir = Path::new("corpus").join(target);
    fs::create_dir_all(&dir).expect("create corpus dir");
    fs::write(dir.join(name), bytes).expect("write seed");
}

fn main() {
    write(
        "ply",
        "tetra.ply",
        b"ply\nformat ascii 1.0\ncomment regular tetrahedron\nelement vertex 4\n\
          property float x\nproperty float y\nproperty float z\nend_header\n\
          1 1 1\n1 -1 -1\n-1 1 -1\n-1 -1 1\n",
    );
    write(
        "ply",
        "extra_props.ply",
        b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float nx\n\
          property float x\nproperty float y\nproperty float z\n\
          element face 1\nproperty list uchar int vertex_indices\nend_header\n\
          9 0 0 0\n9 0.5 0.25 0.125\n3 0 1 0\n",
    );

    let levels = vec![
        Tensor::new(&[4, 4, 2], (0..32).map(|i| i as f64 * 0.01).collect()),
        Tensor::new(&[2, 2, 2], (0..8).map(|i| i as f64 * 0.1).collect()),
    ];
    let pyramid = FeaturePyramid::new(levels, 64.0).expect("valid toy pyramid");
    write("pyramid", "tiny.bin", &pyramid_to_bytes(&pyramid));

    let config = RefinerConfig {
        d_model: 8,
        heads: 2,
        points: 1,
        levels: 2,
        keypoints: 3,
        steps: 1,
        pos_embed_freqs: 2,
        channels: 4,
        shared_steps: false,
    };
    let params = ParamStore::init(&config, 9);
    write("checkpoint", "tiny.bin", &checkpoint_to_bytes(&config, &params));

    let pose = Pose::new(
        Matrix3::identity(),
        Vector3::new(0.05, -0.02, 1.1),
    );
    let records = vec![
        InstanceRecord::new(1, 1, 1, &pose),
        InstanceRecord::new(1, 2, 7, &pose),
    ];
    write("instances_jsonl", "two.jsonl", instances_to_jsonl(&records).as_bytes());

    write(
        "models_manifest",
        "models.json",
        br#"[
  {"obj": 1, "ply": "obj1.ply", "diameter": 0.2},
  {"obj": 2, "ply": "obj2.ply", "diameter": 0.15, "symmetric": true,
   "symmetries": [[-1,0,0, 0,-1,0, 0,0,1]]}
]"#,
    );

    write("pose_json", "identity.json", pose_to_json(&pose).as_bytes());

    write(
        "intrinsics_json",
        "camera.json",
        br#"{"fx": 600.0, "fy": 590.0, "cx": 320.0, "cy": 240.0}"#,
    );

    let model = demo_object_model(48, 5).expect("demo model");
    let scene = generate_scene(&model, 11, &SceneConfig::default()).expect("scene");
    let sidecar = serde_json::to_string_pretty(&scene.sidecar()).expect("sidecar json");
    write("scene_sidecar", "scene.json", sidecar.as_bytes());

    write(
        "cli_config",
        "full.json",
        br#"{"seed": 1, "steps": 2, "scenes": 3, "threads": 1}"#,
    );
    write("cli_config", "partial.json", br#"{"steps": 10}"#);

    println!("corpus seeds written");
}
