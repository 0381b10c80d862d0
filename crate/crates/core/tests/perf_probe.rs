use semtok_core::diffcore::{Array, Tape};
use std::time::Instant;

fn time_ms(iters: usize, mut f: impl FnMut()) -> f64 {
    let t0 = Instant::now();
    for _ in 0..iters { f(); }
    t0.elapsed().as_secs_f64() * 1e3 / iters as f64
}

#[test]
#[ignore]
fn attention_parts() {
    let bh = 192usize; let l = 80; let hd = 16;
    let a = Array::<f32>::full(vec![bh, l, hd], 0.5);
    let b = Array::<f32>::full(vec![bh, l, hd], 0.25);
    let s_arr = Array::<f32>::full(vec![bh, l, l], 0.1);

    let ms = time_ms(100, || {
        let mut t = Tape::<f32>::new();
        let av = t.constant(a.clone());
        let bv = t.constant(b.clone());
        let _ = t.bmm(av, bv, true).unwrap();
    });
    println!("scores bmm_nt [192,80,16]^2: {:.3} ms ({:.1} GFLOPS)", ms, 2.0*(bh*l*l*hd) as f64/ms/1e6);

    let ms = time_ms(100, || {
        let mut t = Tape::<f32>::new();
        let sv = t.constant(s_arr.clone());
        let bv = t.constant(b.clone());
        let _ = t.bmm(sv, bv, false).unwrap();
    });
    println!("mix bmm_nn [192,80,80]x[192,80,16]: {:.3} ms ({:.1} GFLOPS)", ms, 2.0*(bh*l*l*hd) as f64/ms/1e6);

    let ms = time_ms(100, || {
        let mut t = Tape::<f32>::new();
        let sv = t.constant(s_arr.clone());
        let _ = t.softmax_last(sv);
    });
    println!("softmax [192*80 rows of 80]: {:.3} ms", ms);

    let ms = time_ms(100, || {
        let mut t = Tape::<f32>::new();
        let sv = t.constant(s_arr.clone());
        let _ = t.mul_scalar(sv, 1.5);
    });
    println!("mul_scalar 1.2M: {:.3} ms", ms);
}
