use attrition_pqr::dgp::{generate_replication, DesignConfig, DesignId};
use attrition_pqr::panel::{load_panel, load_streaming, read_panel, PanelSchema};
use attrition_pqr::Error;

const GOOD: &str = "subject_id,period,response,d_1,x_1\n\
                    a,1,1.0,0,0.5\n\
                    a,2,2.0,0,0.7\n\
                    a,3,,0,0.9\n\
                    b,1,3.0,1,0.1\n\
                    b,2,4.0,1,0.2\n\
                    b,3,5.0,1,0.3\n";

fn invalid(csv: &str) -> String {
    match read_panel(csv.as_bytes(), &PanelSchema::default()) {
        Err(Error::InvalidPanel(msg)) => msg,
        other => panic!("expected an invalid-panel error, got {other:?}"),
    }
}

#[test]
fn auto_detects_treatment_and_covariates() {
    let ds = read_panel(GOOD.as_bytes(), &PanelSchema::default()).unwrap();
    assert_eq!((ds.n_subjects(), ds.n_periods(), ds.p_d(), ds.p_x()), (2, 3, 1, 2));
    assert_eq!(ds.treat(1, 0), &[1.0]);
    assert!(!ds.observed(0, 2));
}

#[test]
fn corruptions_are_rejected_with_a_reason() {
    let non_monotone = GOOD.replace("b,2,4.0", "b,2,");
    assert!(invalid(&non_monotone).contains("non-monotone"));
    let first_missing = GOOD.replace("b,1,3.0", "b,1,");
    assert!(invalid(&first_missing).contains("first-period"));
    let duplicate = format!("{GOOD}b,3,5.0,1,0.3\n");
    assert!(invalid(&duplicate).contains("duplicate"));
    let ragged: String = GOOD.lines().filter(|l| !l.starts_with("b,2")).map(|l| format!("{l}\n")).collect();
    assert!(invalid(&ragged).contains("non-rectangular"));
    let bad_number = GOOD.replace("0.7", "abc");
    assert!(read_panel(bad_number.as_bytes(), &PanelSchema::default()).is_err());
    let schema = PanelSchema { response: "outcome".into(), ..Default::default() };
    assert!(matches!(read_panel(GOOD.as_bytes(), &schema), Err(Error::InvalidPanel(_))));
}

#[test]
fn explicit_columns_override_prefixes() {
    let csv = GOOD.replace("x_1", "income");
    let schema = PanelSchema { covars: vec!["income".into()], ..Default::default() };
    let ds = read_panel(csv.as_bytes(), &schema).unwrap();
    assert_eq!(ds.p_x(), 2);
    assert_eq!(ds.covars(0, 1), &[1.0, 0.7]);
}

#[test]
fn simulated_panels_survive_a_file_round_trip() {
    let cfg = DesignConfig::preset(DesignId::D6, 50, 2, 3).unwrap();
    let g = generate_replication(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p, s) = (dir.path().join("panel.csv"), dir.path().join("stream.csv"));
    g.dataset.save(&p).unwrap();
    g.dataset.write_streaming_csv(std::fs::File::create(&s).unwrap()).unwrap();
    let back = load_streaming(load_panel(&p, &PanelSchema::default()).unwrap(), &s).unwrap();
    assert_eq!(back.n_observed(), g.dataset.n_observed());
    assert_eq!(back.streaming().len(), g.dataset.streaming().len());
    for i in 0..50 {
        for t in 0..2 {
            assert_eq!(back.response(i, t), g.dataset.response(i, t));
            assert_eq!(back.covars(i, t), g.dataset.covars(i, t));
        }
    }
}
