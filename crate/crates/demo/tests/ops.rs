use sector_demo::{angle_run, route_run, schedule_run, AngleRequest, RouteRequest, ScheduleRequest};

#[test]
fn default_angle_run_flags_the_planted_window() {
    let r = angle_run(&AngleRequest::default()).unwrap();
    assert_eq!(r.flagged, vec![21]);
    assert_eq!(r.windows.len(), 30);
    assert_eq!(r.scores.len(), r.grid * r.grid);
    let max = r.scores.iter().cloned().fold(0.0, f64::max);
    assert!(max > 0.0 && max <= 1.0);
}

#[test]
fn stable_angle_run_has_no_scores() {
    let r = angle_run(&AngleRequest { planted_window: None, ..Default::default() }).unwrap();
    assert!(r.flagged.is_empty());
    assert!(r.scores.is_empty());
}

#[test]
fn route_reaches_the_owner_within_bound() {
    for n in [1, 2, 9, 64] {
        let owner = route_run(&RouteRequest { nodes: n, name: "data/part-001".into(), from: 0 }).unwrap().owner;
        for from in 0..n {
            let r = route_run(&RouteRequest { nodes: n, name: "data/part-001".into(), from }).unwrap();
            assert_eq!(r.owner, owner);
            assert_eq!(r.path[0], r.members[from].addr);
            assert!(r.hops <= r.hop_bound);
            assert_eq!(r.members.len(), n);
        }
    }
    assert!(route_run(&RouteRequest { nodes: 4, name: String::new(), from: 0 }).is_err());
}

#[test]
fn schedule_bars_cover_every_segment_without_overlap() {
    let req = ScheduleRequest::default();
    let r = schedule_run(&req).unwrap();
    assert_eq!(r.bars.len(), req.files * req.segments_per_file);
    for spe in 0..r.spe_node.len() {
        let mut lane: Vec<_> = r.bars.iter().filter(|b| b.spe == spe).collect();
        lane.sort_by(|a, b| a.start.total_cmp(&b.start));
        assert!(lane.windows(2).all(|w| w[0].end <= w[1].start));
    }
    assert!(schedule_run(&ScheduleRequest { replicas: 9, ..Default::default() }).is_err());
}

#[test]
fn json_entry_points() {
    let out = sector_demo::route(r#"{"nodes": 8, "name": "x"}"#).unwrap();
    assert!(out.contains("\"owner\""));
    let out = sector_demo::schedule("{}").unwrap();
    assert!(out.contains("\"bars\""));
}
