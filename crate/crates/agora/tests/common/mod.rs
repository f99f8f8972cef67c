#![allow(dead_code)]

use std::path::PathBuf;

use agora::record::{LogLine, RunRecord};
use agora::scenario::{load_scenario, Scenario};

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn load(name: &str) -> Scenario {
    load_scenario(&scenario_dir().join(format!("{name}.json"))).expect("corpus scenario loads")
}

/// Every corpus scenario, sorted by file name.
pub fn corpus() -> Vec<(String, Scenario)> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(scenario_dir())
        .expect("scenario dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            (name, load_scenario(&p).expect("corpus scenario loads"))
        })
        .collect()
}

pub fn events<'a>(record: &'a RunRecord, kind: &'a str) -> impl Iterator<Item = &'a LogLine> + 'a {
    record.events.iter().filter(move |e| e.event == kind)
}

pub fn count(record: &RunRecord, kind: &str) -> usize {
    events(record, kind).count()
}

pub fn kinds(record: &RunRecord) -> Vec<&str> {
    record.events.iter().map(|e| e.event.as_str()).collect()
}
