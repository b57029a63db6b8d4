mod common;

use std::collections::HashSet;

use asana_core::feedback::Channel;
use asana_core::model::ModelVariant;
use asana_core::session_log::{replay, SessionLog};
use asana_service::{Connection, ServerMsg, ServiceError};

use common::{bent_lines, manager, perfect_lines, resources};

fn evaluations(msgs: &[ServerMsg]) -> Vec<&asana_core::pipeline::EvaluationMsg> {
    msgs.iter()
        .filter_map(|m| match m {
            ServerMsg::Evaluation(e) => Some(e),
            _ => None,
        })
        .collect()
}

#[test]
fn start_acknowledges_with_fresh_ids() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), 8);
    let ids: HashSet<String> = (0..5)
        .map(|_| m.start("mountain", ModelVariant::Float).unwrap().session_id)
        .collect();
    assert_eq!(ids.len(), 5);
    let s = m.start("warrior_ii", ModelVariant::Quantized).unwrap();
    assert_eq!(s.display_name, "Warrior II");
    assert_eq!(s.angle_table_version, "coco17-angles-v1");
    assert_eq!(s.joints.len(), 8);
    assert!(s.classifier);
}

#[test]
fn unknown_pose_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), 8);
    let err = m.start("headstand_on_a_unicycle", ModelVariant::Float).unwrap_err();
    assert!(matches!(err, ServiceError::UnknownPose(_)));
    assert_eq!(m.active_sessions(), 0);

    let mut conn = Connection::new(m);
    let replies = conn.handle(r#"{"type":"start","pose_id":"nope"}"#);
    assert!(matches!(&replies[..], [ServerMsg::Error(e)] if e.code == "UnknownPose"));
}

#[test]
fn capacity_is_enforced_and_freed() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), 3);
    let ids: Vec<String> = (0..3)
        .map(|_| m.start("mountain", ModelVariant::Float).unwrap().session_id)
        .collect();
    let err = m.start("mountain", ModelVariant::Float).unwrap_err();
    assert!(matches!(err, ServiceError::CapacityExceeded(3)));
    assert_eq!(err.code(), "CapacityExceeded");
    m.end(&ids[0]).unwrap();
    m.start("mountain", ModelVariant::Float).unwrap();
}

#[test]
fn perfect_stream_scores_one_without_text() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), 1);
    let id = m.start("tree", ModelVariant::Float).unwrap().session_id;
    for line in perfect_lines("tree", 40) {
        let msgs = m.handle_frame(&id, &line).unwrap();
        let evals = evaluations(&msgs);
        assert_eq!(evals.len(), 1);
        assert!((evals[0].score.unwrap() - 1.0).abs() < 1e-12);
        assert!(evals[0].joints.iter().all(|j| !j.flagged));
        assert!(!msgs.iter().any(|m| matches!(m, ServerMsg::Feedback(_))));
    }
    let summary = m.end(&id).unwrap();
    assert_eq!(summary.frames, 40);
    assert!((summary.mean_score.unwrap() - 1.0).abs() < 1e-12);
    assert!(summary.flag_counts.values().all(|&c| c == 0));
}

#[test]
fn classification_waits_for_a_full_window() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), 1);
    let id = m.start("mountain", ModelVariant::Quantized).unwrap().session_id;
    let mut classified_at = Vec::new();
    for (i, line) in perfect_lines("mountain", 45).iter().enumerate() {
        let msgs = m.handle_frame(&id, line).unwrap();
        assert!(matches!(msgs[0], ServerMsg::Evaluation(_)), "evaluation comes first");
        for msg in &msgs {
            if let ServerMsg::Classification(c) = msg {
                assert!((0.0..=1.0).contains(&c.confidence));
                classified_at.push(i + 1);
            }
        }
    }
    assert_eq!(classified_at, vec![30, 35, 40, 45]);
}

#[test]
fn malformed_frame_gets_one_error_and_session_continues() {
    let dir = tempfile::tempdir().unwrap();
    let mut conn = Connection::new(manager(dir.path(), 1));
    assert!(matches!(
        &conn.handle(r#"{"type":"start","pose_id":"mountain"}"#)[..],
        [ServerMsg::Started(_)]
    ));
    let lines = perfect_lines("mountain", 6);
    let frame = |l: &str| format!(r#"{{"type":"frame","frame":{l}}}"#);
    for l in &lines[..3] {
        assert!(matches!(conn.handle(&frame(l))[0], ServerMsg::Evaluation(_)));
    }
    let bad = conn.handle(r#"{"type":"frame","frame":{"t":100,"id":3,"kp":[1,2,3]}}"#);
    assert!(matches!(&bad[..], [ServerMsg::Error(e)] if e.code == "SchemaViolation"));
    let garbage = conn.handle("{\"type\":\"frame\",\"frame\":");
    assert!(matches!(&garbage[..], [ServerMsg::Error(e)] if e.code == "MalformedMessage"));
    for l in &lines[3..] {
        let replies = conn.handle(&frame(l));
        assert!(matches!(&replies[0], ServerMsg::Evaluation(e) if e.score.is_some()));
    }
    let end = conn.handle(r#"{"type":"end"}"#);
    let [ServerMsg::Summary(s)] = &end[..] else {
        panic!("expected a summary, got {end:?}");
    };
    assert_eq!(s.frames, 6);
    assert_eq!(s.rejected, 1);
}

#[test]
fn end_twice_is_unknown_session() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), 2);
    let id = m.start("mountain", ModelVariant::Float).unwrap().session_id;
    m.end(&id).unwrap();
    assert!(matches!(m.end(&id), Err(ServiceError::UnknownSession(_))));
    assert!(matches!(m.handle_frame(&id, "{}"), Err(ServiceError::UnknownSession(_))));

    let mut conn = Connection::new(m);
    let replies = conn.handle(r#"{"type":"end"}"#);
    assert!(matches!(&replies[..], [ServerMsg::Error(e)] if e.code == "UnknownSession"));
}

#[test]
fn second_start_on_one_connection_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), 4);
    let mut conn = Connection::new(m.clone());
    conn.handle(r#"{"type":"start","pose_id":"mountain"}"#);
    let replies = conn.handle(r#"{"type":"start","pose_id":"tree"}"#);
    assert!(matches!(&replies[..], [ServerMsg::Error(e)] if e.code == "SessionActive"));
    assert_eq!(m.active_sessions(), 1);
    drop(conn);
    assert_eq!(m.active_sessions(), 0, "dropping the connection ends its session");
}

#[test]
fn feedback_text_for_a_bent_joint_respects_cooldown() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), 1);
    let id = m.start("mountain", ModelVariant::Float).unwrap().session_id;
    // 120 frames at 33 ms span 3.9 s: text at 0 ms, then again after 2000 ms
    let mut texts = Vec::new();
    let mut overlays = 0;
    for line in bent_lines("mountain", 0, 40.0, 120) {
        for msg in m.handle_frame(&id, &line).unwrap() {
            if let ServerMsg::Feedback(f) = msg {
                match f.event.channel {
                    Channel::Text => texts.push((f.event.timestamp_ms, f.event.message().unwrap().to_owned())),
                    Channel::Overlay => overlays += 1,
                    Channel::Voice => {}
                }
            }
        }
    }
    assert_eq!(overlays, 120);
    let times: Vec<i64> = texts.iter().map(|t| t.0).collect();
    assert_eq!(times, vec![0, 2013]);
    assert!(texts.iter().all(|(_, msg)| msg.contains("left elbow")));
}

#[test]
fn log_replays_to_identical_messages() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), 1);
    let id = m.start("warrior_ii", ModelVariant::Float).unwrap().session_id;
    let mut live = Vec::new();
    let mut lines = perfect_lines("warrior_ii", 20);
    lines.extend(bent_lines("warrior_ii", 6, 25.0, 40).into_iter().skip(20));
    for line in &lines {
        live.extend(m.handle_frame(&id, line).unwrap());
    }
    let summary = m.end(&id).unwrap();

    let log = SessionLog::read(&dir.path().join(format!("{id}.kpjsonl"))).unwrap();
    assert_eq!(log.summary(), Some(&summary));
    let res = resources();
    let r = replay(&log, &res, None).unwrap();
    assert!(r.reproduces_log());
    assert_eq!(r.summary, summary);
    let replayed: Vec<ServerMsg> = r
        .outputs
        .iter()
        .flat_map(|o| o.records())
        .map(ServerMsg::from)
        .collect();
    assert_eq!(replayed, live);
    let mean: f64 = evaluations(&live).iter().map(|e| e.score.unwrap()).sum::<f64>() / 40.0;
    assert!((summary.mean_score.unwrap() - mean).abs() < 1e-12);
}

#[test]
fn sessions_are_isolated_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path(), 8);
    let poses = ["mountain", "tree", "warrior_ii", "mountain"];
    let handles: Vec<_> = poses
        .iter()
        .map(|&pose| {
            let m = m.clone();
            std::thread::spawn(move || {
                let id = m.start(pose, ModelVariant::Float).unwrap().session_id;
                let mut scores = Vec::new();
                for line in perfect_lines(pose, 50) {
                    for msg in m.handle_frame(&id, &line).unwrap() {
                        if let ServerMsg::Evaluation(e) = msg {
                            scores.push((e.frame_id, e.score.unwrap()));
                        }
                    }
                }
                (scores, m.end(&id).unwrap())
            })
        })
        .collect();
    for h in handles {
        let (scores, summary) = h.join().unwrap();
        let ids: Vec<u64> = scores.iter().map(|s| s.0).collect();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        assert!(scores.iter().all(|s| (s.1 - 1.0).abs() < 1e-12));
        assert_eq!(summary.frames, 50);
    }
    assert_eq!(m.active_sessions(), 0);
}
