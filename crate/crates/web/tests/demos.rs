use vphype_web::{confusion_report, impulse_response, prompt_attention, GRID};

#[test]
fn impulse_response_is_a_decaying_exponential() {
    let (delta, a) = (0.5, -0.4);
    let y = impulse_response(delta, a, 12).unwrap();
    let ratio = (delta * a).exp();
    assert!((y[0] - delta).abs() < 1e-15);
    for t in 1..y.len() {
        assert!((y[t] / y[t - 1] - ratio).abs() < 1e-12);
    }
    assert!(impulse_response(0.0, a, 4).is_err());
    assert!(impulse_response(delta, 0.1, 4).is_err());
    assert!(impulse_response(delta, a, 0).is_err());
}

#[test]
fn attention_sharpens_as_tau_falls() {
    let entropy = |tau: f64| prompt_attention(tau, 7).unwrap()["entropy"].as_f64().unwrap();
    let (cold, warm, hot) = (entropy(0.05), entropy(1.0), entropy(100.0));
    assert!(cold < warm && warm < hot, "{cold} {warm} {hot}");
    let max = ((GRID * GRID) as f64).ln();
    assert!((hot - max).abs() < 1e-3);

    let v = prompt_attention(1.0, 7).unwrap();
    let row: Vec<f64> = v["row"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(row.len(), GRID * GRID);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(v, prompt_attention(1.0, 7).unwrap());
    assert!(prompt_attention(0.0, 7).is_err());
}

#[test]
fn confusion_report_hand_case() {
    let r = confusion_report(&[40, 10, 20, 30], 2).unwrap();
    assert!((r["oa"].as_f64().unwrap() - 0.7).abs() < 1e-15);
    assert!((r["aa"].as_f64().unwrap() - 0.7).abs() < 1e-15);
    assert!((r["kappa"].as_f64().unwrap() - 0.4).abs() < 1e-15);
    assert!(confusion_report(&[1, 2, 3], 2).is_err());
    assert!(confusion_report(&[0, 0, 0, 0], 2).is_err());
}
