use ndarray::{ArrayD, IxDyn};
use std::time::Instant;
use videodistill::autograd::Graph;

fn main() {
    // conv2d typical backbone shapes at H=W=128, plus MSI conv3d level-0 shape
    let cases2d: Vec<(usize, usize, usize, usize, usize)> = vec![
        // (cin, h, w, cout, stride)
        (1, 128, 128, 32, 2),
        (32, 64, 64, 32, 2),
        (32, 32, 32, 64, 2),
        (64, 16, 16, 128, 2),
        (128, 8, 8, 256, 2),
    ];
    for (cin, h, w, cout, s) in cases2d {
        let x = ArrayD::from_elem(IxDyn(&[cin, h, w]), 0.5f32);
        let wt = ArrayD::from_elem(IxDyn(&[cout, cin, 3, 3]), 0.01f32);
        let b = ArrayD::from_elem(IxDyn(&[cout]), 0.0f32);
        let t0 = Instant::now();
        let iters = 20;
        for _ in 0..iters {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
            let y = g.conv2d(xv, wv, bv, s, 1);
            let l = g.mean_all(y);
            let _ = g.backward(l);
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        println!("conv2d {cin}x{h}x{w} -> {cout} stride {s}: {:.2} ms fwd+bwd", dt * 1e3);
    }
    // conv3d at MSI levels (d=32 and d=64), T=3
    for d in [32usize, 64] {
        for (t, h, w) in [(3usize, 32usize, 32usize), (3, 16, 16)] {
            let x = ArrayD::from_elem(IxDyn(&[d, t, h, w]), 0.5f32);
            let wt = ArrayD::from_elem(IxDyn(&[d, d, 3, 3, 3]), 0.01f32);
            let b = ArrayD::from_elem(IxDyn(&[d]), 0.0f32);
            let t0 = Instant::now();
            let iters = 10;
            for _ in 0..iters {
                let mut g = Graph::new();
                let (xv, wv, bv) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
                let y = g.conv3d(xv, wv, bv);
                let l = g.mean_all(y);
                let _ = g.backward(l);
            }
            let dt = t0.elapsed().as_secs_f64() / iters as f64;
            println!("conv3d d={d} {t}x{h}x{w}: {:.2} ms fwd+bwd", dt * 1e3);
        }
    }
    // matmul raw speed
    for n in [256usize, 512, 1024] {
        let a = ndarray::Array2::<f32>::from_elem((n, n), 0.5);
        let b = ndarray::Array2::<f32>::from_elem((n, n), 0.5);
        let t0 = Instant::now();
        let iters = 5;
        for _ in 0..iters {
            let _c = a.dot(&b);
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let gflops = 2.0 * (n as f64).powi(3) / dt / 1e9;
        println!("matmul {n}: {:.1} ms, {gflops:.2} GFLOPS", dt * 1e3);
    }
}
