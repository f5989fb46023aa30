use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use imgchat_core::model::{Model, ModelConfig};
use imgchat_core::synthworld::{emit_benchmark, write_benchmark, BenchmarkConfig, World, WorldSpec};
use imgchat_core::trainer::{write_checkpoint, Checkpoint, TrainConfig, Trainer};
use imgchat_ffi::*;
use serde_json::Value;

fn fixture(dir: &Path) -> (CString, CString) {
    let world = World::new(WorldSpec::default()).unwrap();
    let bench = emit_benchmark(
        &world,
        &BenchmarkConfig {
            test_pool: 40,
            per_family: 2,
            tchat: 4,
            ichat: 4,
            mchat: 4,
            seed: 5,
        },
    )
    .unwrap();
    let data = dir.join("data");
    write_benchmark(&world, &bench, &data).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        n_latents: 2,
        d_retrieval: 8,
        ..ModelConfig::toy(world.vocab().len(), world.d_img())
    };
    let t = Trainer::new(
        Model::new(cfg).unwrap(),
        TrainConfig {
            total_steps: 1,
            warmup_steps: 0,
            batch_size: 2,
            queue_capacity: 8,
            ..TrainConfig::stage1()
        },
    )
    .unwrap();
    let ckpt = dir.join("model.ckpt");
    write_checkpoint(&Checkpoint::from_trainer(&t), &ckpt).unwrap();
    (
        CString::new(data.to_str().unwrap()).unwrap(),
        CString::new(ckpt.to_str().unwrap()).unwrap(),
    )
}

fn last_error() -> String {
    let p = imgchat_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut c_char) -> Value {
    assert!(!s.is_null());
    let v = serde_json::from_str(CStr::from_ptr(s).to_str().unwrap()).unwrap();
    imgchat_string_free(s);
    v
}

#[test]
fn session_lifecycle_through_the_c_abi() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    unsafe {
        let mut engine = ptr::null_mut();
        assert_eq!(imgchat_engine_open(data.as_ptr(), ckpt.as_ptr(), 5, &mut engine), ImgchatStatus::Ok);
        assert!(imgchat_last_error().is_null());
        assert_eq!(imgchat_engine_gallery_size(engine), 40);

        let id = CString::new("c-1").unwrap();
        let mut s = ptr::null_mut();
        assert_eq!(imgchat_session_new(id.as_ptr(), &mut s), ImgchatStatus::Ok);

        let turn = CString::new(r#"{"text":"a red dog","force_retrieval":true}"#).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(imgchat_session_post_turn(engine, s, turn.as_ptr(), &mut out), ImgchatStatus::Ok);
        let r = take(out);
        let cands = r["candidates"].as_array().unwrap();
        assert_eq!(cands.len(), 5);
        assert_eq!(imgchat_session_awaiting_selection(s), 1);

        // A second turn while candidates are pending is a state conflict.
        let mut out = ptr::null_mut();
        assert_eq!(imgchat_session_post_turn(engine, s, turn.as_ptr(), &mut out), ImgchatStatus::Conflict);
        assert!(out.is_null());
        assert!(last_error().contains("candidates_pending"));

        assert_eq!(imgchat_session_select(s, u32::MAX - 1), ImgchatStatus::InvalidInput);
        let pick = cands[1]["image_id"].as_u64().unwrap() as u32;
        assert_eq!(imgchat_session_select(s, pick), ImgchatStatus::Ok);
        assert_eq!(imgchat_session_awaiting_selection(s), 0);
        assert_eq!(imgchat_session_dismiss(s), ImgchatStatus::Conflict);

        let turn2 = CString::new(r#"{"text":"same but blue","force_retrieval":true}"#).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(imgchat_session_post_turn(engine, s, turn2.as_ptr(), &mut out), ImgchatStatus::Ok);
        take(out);
        assert_eq!(imgchat_session_dismiss(s), ImgchatStatus::Ok);

        let mut out = ptr::null_mut();
        assert_eq!(imgchat_session_transcript(engine, s, &mut out), ImgchatStatus::Ok);
        let t = take(out);
        assert_eq!(t["session_id"], "c-1");
        assert_eq!(t["entries"].as_array().unwrap().len(), 4);

        let json = CString::new(t.to_string()).unwrap();
        let mut mismatches = usize::MAX;
        assert_eq!(imgchat_replay(engine, json.as_ptr(), &mut mismatches), ImgchatStatus::Ok);
        assert_eq!(mismatches, 0);

        let mut tampered = t.clone();
        tampered["entries"][0]["response"]["candidates"][0]["image_id"] = pick.into();
        tampered["entries"][0]["response"]["candidates"][1]["image_id"] = cands[0]["image_id"].clone();
        let json = CString::new(tampered.to_string()).unwrap();
        assert_eq!(imgchat_replay(engine, json.as_ptr(), &mut mismatches), ImgchatStatus::Ok);
        assert_eq!(mismatches, 1);

        imgchat_session_free(s);
        imgchat_engine_free(engine);
    }
}

#[test]
fn bad_arguments_map_to_status_codes() {
    unsafe {
        let mut engine = ptr::null_mut();
        assert_eq!(
            imgchat_engine_open(ptr::null(), ptr::null(), 5, &mut engine),
            ImgchatStatus::NullArgument
        );
        assert!(last_error().contains("data_dir"));

        let missing = CString::new("/nonexistent/imgchat").unwrap();
        assert_eq!(imgchat_engine_open(missing.as_ptr(), missing.as_ptr(), 5, &mut engine), ImgchatStatus::Io);
        assert!(engine.is_null());

        let bad = [0xffu8, 0xfe, 0];
        let mut s = ptr::null_mut();
        assert_eq!(imgchat_session_new(bad.as_ptr().cast(), &mut s), ImgchatStatus::InvalidUtf8);
        assert_eq!(imgchat_session_select(ptr::null_mut(), 1), ImgchatStatus::NullArgument);
        assert_eq!(imgchat_session_awaiting_selection(ptr::null()), 0);
        assert_eq!(imgchat_engine_gallery_size(ptr::null()), 0);

        let id = CString::new("x").unwrap();
        assert_eq!(imgchat_session_new(id.as_ptr(), &mut s), ImgchatStatus::Ok);
        let mut mismatches = 0;
        let junk = CString::new("{not json").unwrap();
        assert_eq!(imgchat_replay(ptr::null(), junk.as_ptr(), &mut mismatches), ImgchatStatus::NullArgument);
        imgchat_session_free(s);

        // Freeing NULL is a no-op.
        imgchat_session_free(ptr::null_mut());
        imgchat_engine_free(ptr::null_mut());
        imgchat_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_json_and_engine_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    unsafe {
        let mut engine = ptr::null_mut();
        assert_eq!(imgchat_engine_open(data.as_ptr(), ckpt.as_ptr(), 0, &mut engine), ImgchatStatus::InvalidInput);
        assert_eq!(imgchat_engine_open(data.as_ptr(), ckpt.as_ptr(), 3, &mut engine), ImgchatStatus::Ok);
        let id = CString::new("j").unwrap();
        let mut s = ptr::null_mut();
        imgchat_session_new(id.as_ptr(), &mut s);
        let mut out = ptr::null_mut();
        let junk = CString::new("{\"text\": 3").unwrap();
        assert_eq!(imgchat_session_post_turn(engine, s, junk.as_ptr(), &mut out), ImgchatStatus::InvalidJson);
        let unknown = CString::new(r#"{"text":"zebra"}"#).unwrap();
        assert_eq!(imgchat_session_post_turn(engine, s, unknown.as_ptr(), &mut out), ImgchatStatus::InvalidInput);
        let missing = CString::new(r#"{"images":[4000000000]}"#).unwrap();
        assert_eq!(imgchat_session_post_turn(engine, s, missing.as_ptr(), &mut out), ImgchatStatus::NotFound);
        assert!(out.is_null());
        imgchat_session_free(s);
        imgchat_engine_free(engine);
    }
}

#[test]
fn match_probability_matches_softmax() {
    let sims = [0.3, -0.2, 0.9, 0.1];
    let tau = 0.07;
    let mut out = [0.0; 5];
    unsafe {
        assert_eq!(imgchat_image_match_prob(sims.as_ptr(), 4, 0.5, tau, out.as_mut_ptr()), ImgchatStatus::Ok);
    }
    let all = [0.3, -0.2, 0.9, 0.1, 0.5];
    let z: f64 = all.iter().map(|s: &f64| (s / tau).exp()).sum();
    for (p, s) in out.iter().zip(all) {
        assert!((p - (s / tau).exp() / z).abs() < 1e-12);
    }

    let mut one = [0.0];
    unsafe {
        assert_eq!(imgchat_image_match_prob(ptr::null(), 0, 0.2, 1.0, one.as_mut_ptr()), ImgchatStatus::Ok);
        assert_eq!(one[0], 1.0);
        assert_eq!(
            imgchat_image_match_prob(sims.as_ptr(), 4, 0.5, -1.0, out.as_mut_ptr()),
            ImgchatStatus::InvalidInput
        );
        assert_eq!(imgchat_image_match_prob(ptr::null(), 2, 0.5, 1.0, out.as_mut_ptr()), ImgchatStatus::NullArgument);
    }
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/imgchat.h")).unwrap();
    for name in [
        "typedef struct ImgchatEngine ImgchatEngine",
        "typedef struct ImgchatSession ImgchatSession",
        "IMGCHAT_STATUS_CONFLICT = 6",
        "imgchat_engine_open",
        "imgchat_session_post_turn",
        "imgchat_replay",
        "imgchat_image_match_prob",
        "imgchat_last_error",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "imgchat.h"
int run(const char *data, const char *ckpt) {
    ImgchatEngine *e = NULL;
    ImgchatSession *s = NULL;
    char *out = NULL;
    double p[3];
    double q[2] = {0.1, 0.2};
    if (imgchat_engine_open(data, ckpt, 5, &e) != IMGCHAT_STATUS_OK) return 1;
    imgchat_session_new("c", &s);
    imgchat_session_post_turn(e, s, "{\"text\":\"a dog\"}", &out);
    imgchat_string_free(out);
    imgchat_image_match_prob(q, 2, 0.3, 0.07, p);
    imgchat_session_free(s);
    imgchat_engine_free(e);
    return imgchat_last_error() == NULL ? 0 : 2;
}
"#,
    )
    .unwrap();
    let status = match std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler; skipping");
            return;
        }
    };
    assert!(status.success());
}
