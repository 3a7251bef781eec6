use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mario_ffi::*;

const SPEC: &str = r#"{"num_nodes":80,"m":6,"n":2,"d_in":6,"vocab_txt":24,"topic_size":4,
    "p_in":0.15,"p_out":0.02,"pi":[0.35,0.35,0.3],"seed":4}"#;

const CONFIG: &str = r#"{"seed":5,"mode":"mario",
    "stage1":{"epochs":1,"tower":{"layers":1,"heads":2,"d":8}},
    "lm":{"d_lm":16,"layers":1,"heads":2,"context":64},
    "prompt":{"limit":64},"router":{"hidden":[16,8,4]},"stage2":{"epochs":1}}"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = mario_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn full_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut graph = ptr::null_mut();
        assert_eq!(
            mario_graph_generate(c(SPEC).as_ptr(), &mut graph),
            MarioStatus::Ok
        );
        assert_eq!(mario_graph_num_nodes(graph), 80);

        let mut config = ptr::null_mut();
        assert_eq!(
            mario_config_new(c(CONFIG).as_ptr(), &mut config),
            MarioStatus::Ok
        );

        let mut s1 = ptr::null_mut();
        assert_eq!(mario_stage1_train(graph, config, &mut s1), MarioStatus::Ok);
        let mut models = ptr::null_mut();
        assert_eq!(
            mario_stage2_train(graph, s1, config, &mut models),
            MarioStatus::Ok
        );

        let mut acc = -1.0;
        let mut json = ptr::null_mut();
        let st = mario_evaluate(
            graph,
            s1,
            models,
            MARIO_SPLIT_TEST,
            MARIO_MODE_TRAINED,
            &mut acc,
            &mut json,
        );
        assert_eq!(st, MarioStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        let report: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(report["accuracy"].as_f64().unwrap(), acc);
        assert_eq!(report["mode"], "mario");
        mario_string_free(json);

        let s1_dir = c(dir.path().join("s1").to_str().unwrap());
        let s2_dir = c(dir.path().join("s2").to_str().unwrap());
        assert_eq!(mario_stage1_save(s1, s1_dir.as_ptr()), MarioStatus::Ok);
        assert_eq!(mario_models_save(models, s2_dir.as_ptr()), MarioStatus::Ok);
        let (mut s1b, mut modelsb) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(
            mario_stage1_load(s1_dir.as_ptr(), &mut s1b),
            MarioStatus::Ok
        );
        assert_eq!(
            mario_models_load(s2_dir.as_ptr(), &mut modelsb),
            MarioStatus::Ok
        );

        let mut acc2 = -1.0;
        let st = mario_evaluate(
            graph,
            s1b,
            modelsb,
            MARIO_SPLIT_TEST,
            MARIO_MODE_TRAINED,
            &mut acc2,
            ptr::null_mut(),
        );
        assert_eq!(st, MarioStatus::Ok);
        assert_eq!(acc, acc2);

        let mut acc3 = -1.0;
        assert_eq!(
            mario_transfer(s1b, modelsb, graph, &mut acc3, ptr::null_mut()),
            MarioStatus::Ok
        );
        assert_eq!(acc, acc3);

        mario_models_free(modelsb);
        mario_stage1_free(s1b);
        mario_models_free(models);
        mario_stage1_free(s1);
        mario_config_free(config);
        mario_graph_free(graph);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut config = ptr::null_mut();
        let bad = c(r#"{"stage2":{"batch_size":0}}"#);
        assert_eq!(
            mario_config_new(bad.as_ptr(), &mut config),
            MarioStatus::Config
        );
        assert!(config.is_null());
        assert!(last_error().contains("batch size"));

        assert_eq!(
            mario_config_new(c("{not json").as_ptr(), &mut config),
            MarioStatus::Json
        );
        assert_eq!(
            mario_config_new(ptr::null(), ptr::null_mut()),
            MarioStatus::NullArgument
        );

        let mut s1 = ptr::null_mut();
        assert_eq!(
            mario_stage1_load(c("/nonexistent/ckpt").as_ptr(), &mut s1),
            MarioStatus::Contract
        );
        assert!(last_error().contains("no stage 1 checkpoint"));

        let mut graph = ptr::null_mut();
        assert_eq!(
            mario_graph_generate(c(SPEC).as_ptr(), &mut graph),
            MarioStatus::Ok
        );
        assert!(mario_last_error().is_null());
        let mut acc = 0.0;
        let st = mario_evaluate(
            graph,
            ptr::null(),
            ptr::null(),
            MARIO_SPLIT_TEST,
            9,
            &mut acc,
            ptr::null_mut(),
        );
        assert_eq!(st, MarioStatus::NullArgument);
        mario_graph_free(graph);

        let invalid = [0xffu8, 0xfe, 0];
        let st = mario_graph_load(invalid.as_ptr().cast(), &mut graph);
        assert_eq!(st, MarioStatus::InvalidString);
    }
}

#[test]
fn free_functions_accept_null() {
    unsafe {
        mario_graph_free(ptr::null_mut());
        mario_config_free(ptr::null_mut());
        mario_stage1_free(ptr::null_mut());
        mario_models_free(ptr::null_mut());
        mario_string_free(ptr::null_mut());
        assert_eq!(mario_graph_num_nodes(ptr::null()), 0);
    }
    let v = unsafe { CStr::from_ptr(mario_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mario.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "mario_graph_generate",
        "mario_config_new",
        "mario_stage1_train",
        "mario_stage2_train",
        "mario_evaluate",
        "mario_transfer",
        "mario_last_error",
        "typedef struct MarioModels MarioModels",
        "MARIO_STATUS_NUMERICAL = 6",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mario.h\"\nint main(void) { MarioGraph *g = 0; return mario_graph_generate(0, &g) == MARIO_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    match Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        ),
        Err(e) => eprintln!("no C compiler, skipped syntax check: {e}"),
    }
}
