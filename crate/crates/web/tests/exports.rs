use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).expect("exports return JSON")
}

#[test]
fn exports_return_json_documents() {
    let m = parse(clft_web::masks(40, 0.15, 3, 4, 9));
    assert_eq!(m["masks"].as_array().unwrap().len(), 4);
    assert_eq!(m["coverage"].as_array().unwrap().len(), 40);

    let c = parse(clft_web::ctc(10, "ab", 1.0, 3));
    assert_eq!(c["symbols"].as_array().unwrap().len(), 9);
    let grad = c["grad"].as_array().unwrap();
    for row in grad {
        let s: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((s + 1.0).abs() < 1e-9, "each frame's occupancy sums to one, got {s}");
    }

    let e = parse(clft_web::ewc(2.0, vec![1.0], vec![3.0], vec![0.25]));
    assert_eq!(e["penalty"].as_f64().unwrap(), 1.0);
    assert_eq!(e["grad"][0].as_f64().unwrap(), -1.0);
}

#[test]
fn bad_input_becomes_an_error_field() {
    for out in [
        clft_web::masks(10, 1.5, 3, 1, 0),
        clft_web::ctc(2, "zzz", 1.0, 0),
        clft_web::ctc(1, "aa", 1.0, 0),
        clft_web::ewc(1.0, vec![1.0], vec![], vec![1.0]),
    ] {
        assert!(parse(out)["error"].is_string());
    }
}

#[test]
fn same_seed_same_masks() {
    assert_eq!(clft_web::masks(30, 0.2, 2, 3, 5), clft_web::masks(30, 0.2, 2, 3, 5));
    assert_ne!(clft_web::masks(30, 0.2, 2, 3, 5), clft_web::masks(30, 0.2, 2, 3, 6));
}
