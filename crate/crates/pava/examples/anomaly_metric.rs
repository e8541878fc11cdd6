//! Anomaly Frame Count on a hand-written presence series.
//!
//! `cargo run --example anomaly_metric`

use std::collections::BTreeMap;

use pava::privacy::{anomaly_frame_count, PresenceSeries};

fn parse(s: &str) -> Vec<bool> {
    s.chars().map(|c| c == '#').collect()
}

fn main() -> pava::Result<()> {
    // `#` present, `.` absent.
    let person = "####..####.......#####...........####";
    let screen = "#########.###########################";
    let series = PresenceSeries::from_vectors(BTreeMap::from([
        ("person".to_string(), parse(person)),
        ("screen".to_string(), parse(screen)),
    ]))?;
    println!("person  {person}\nscreen  {screen}");
    for th in [1, 3, 5, 10] {
        let r = anomaly_frame_count(&series, 20, th)?;
        let flags: String = (0..series.frames)
            .map(|t| if r.anomalous_frames.values().any(|v| v[t]) { '^' } else { ' ' })
            .collect();
        println!("th={th:<3} {flags}  {} frames, {:.1}%", r.anomaly_frame_count, r.accuracy_percent);
    }
    Ok(())
}
