use nnlp_web::{decode, kmax, window_count, XorDemo};

#[test]
fn kmax_matches_the_worked_matrix() {
    let m = [1., 2., 3., 9., 6., 5., 2., 3., 1., 7., 8., 1., 3., 4., 1.];
    assert_eq!(kmax(&m, 5, 3, 1).unwrap(), vec![9., 8., 5.]);
    assert_eq!(kmax(&m, 5, 3, 2).unwrap(), vec![9., 6., 3., 7., 8., 5.]);
    assert!(kmax(&m, 5, 3, 6).is_err());
    assert!(kmax(&m, 5, 3, 0).is_err());
}

#[test]
fn window_counts() {
    assert_eq!(window_count(9, 3, false), 7);
    assert_eq!(window_count(9, 3, true), 11);
    assert_eq!(window_count(2, 3, false), 0);
}

#[test]
fn marginals_match_enumeration() {
    let (n, l) = (3, 2);
    let em = [0.3, -1.0, 1.2, 0.1, -0.4, 0.8];
    let tr = [0.5, -0.2, 0.0, 1.1];
    let d = decode(&em, &tr, l).unwrap();
    let mut z = 0.0;
    let mut marg = vec![0.0; n * l];
    let mut best = (f64::NEG_INFINITY, vec![]);
    for code in 0..l.pow(n as u32) {
        let y: Vec<usize> = (0..n).map(|i| (code >> (n - 1 - i)) & 1).collect();
        let s: f64 = (0..n).map(|i| em[i * l + y[i]] + if i > 0 { tr[y[i - 1] * l + y[i]] } else { 0.0 }).sum();
        let p = s.exp();
        z += p;
        for (i, &yi) in y.iter().enumerate() {
            marg[i * l + yi] += p;
        }
        if s > best.0 {
            best = (s, y);
        }
    }
    assert!((d.log_partition() - z.ln()).abs() < 1e-12);
    for (a, b) in d.marginals().iter().zip(&marg) {
        assert!((a - b / z).abs() < 1e-12);
    }
    let path: Vec<usize> = d.path().into_iter().map(|v| v as usize).collect();
    assert_eq!(path, best.1);
    assert!((d.score() - best.0).abs() < 1e-12);
}

#[test]
fn crf_rejects_ragged_tables() {
    assert!(decode(&[1.0, 2.0, 3.0], &[0.0; 4], 2).is_err());
    assert!(decode(&[1.0, 2.0], &[0.0; 3], 2).is_err());
}

#[test]
fn xor_hidden_layer_fits_and_surface_has_the_grid_size() {
    let mut demo = XorDemo::create(8, "tanh", 0.1, 1).unwrap();
    demo.run(2000).unwrap();
    assert_eq!(demo.correct().unwrap(), 4);
    assert_eq!(demo.epochs(), 2000);
    let s = demo.surface(5).unwrap();
    assert_eq!(s.len(), 25);
    assert!(s.iter().all(|p| (0.0..=1.0).contains(p)));
    let mut linear = XorDemo::create(0, "tanh", 0.1, 1).unwrap();
    linear.run(2000).unwrap();
    assert!(linear.correct().unwrap() <= 3);
    assert!(XorDemo::create(4, "swish", 0.1, 1).is_err());
}
