use vitrine_core::time::*;

#[test]
fn iso_round_trip() {
    let ts: Timestamp = "2024-02-07T12:30:05Z".parse().unwrap();
    assert_eq!(ts.to_iso8601(), "2024-02-07T12:30:05Z");
    let back: Timestamp = ts.to_iso8601().parse().unwrap();
    assert_eq!(ts, back);
}

#[test]
fn offsets_normalize_to_utc() {
    let a: Timestamp = "2024-02-07T13:00:00+01:00".parse().unwrap();
    let b: Timestamp = "2024-02-07T12:00:00Z".parse().unwrap();
    assert_eq!(a, b);
}

#[test]
fn bare_date_is_midnight() {
    let d: Timestamp = "2024-02-14".parse().unwrap();
    assert_eq!(d.to_iso8601(), "2024-02-14T00:00:00Z");
    assert!("14/02/2024".parse::<Timestamp>().is_err());
}

#[test]
fn window_is_closed_at_the_far_end() {
    let as_of = Timestamp(1_000 * SECONDS_PER_DAY);
    assert!(as_of.minus_days(180).within_days_before(as_of, 180));
    assert!(!as_of.minus_days(181).within_days_before(as_of, 180));
    assert!(!as_of.plus_days(1).within_days_before(as_of, 180));
}
