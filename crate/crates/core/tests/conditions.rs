use std::path::PathBuf;

use tvcgmm::model::TvcDecomposition;
use tvcgmm::simulation::{GridCell, SimulationCondition};

fn checked_in(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../conditions").join(name);
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn checked_in_files_match_constructors() {
    let reference = SimulationCondition::grid(GridCell::reference(TvcDecomposition::IntervalSlopes)).unwrap();
    assert_eq!(SimulationCondition::from_toml(&checked_in("reference.toml")).unwrap(), reference);
    let three = SimulationCondition::three_class(500).unwrap();
    assert_eq!(SimulationCondition::from_toml(&checked_in("three_class.toml")).unwrap(), three);
}

#[test]
fn every_grid_cell_round_trips_through_toml() {
    for d in [TvcDecomposition::IntervalSlopes, TvcDecomposition::IntervalChanges] {
        let cells = GridCell::all(d);
        assert_eq!(cells.len(), 36);
        for cell in cells {
            let c = SimulationCondition::grid(cell).unwrap();
            let back = SimulationCondition::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(c, back);
        }
    }
}

#[test]
fn unknown_fields_and_bad_values_are_rejected() {
    let text = checked_in("reference.toml");
    assert!(SimulationCondition::from_toml(&format!("bogus = 1\n{text}")).is_err());
    assert!(SimulationCondition::from_toml(&text.replace("n = 500", "n = 0")).is_err());
    assert!(SimulationCondition::from_toml(&text.replace("delta = 0.25", "delta = 0.75")).is_err());
}
