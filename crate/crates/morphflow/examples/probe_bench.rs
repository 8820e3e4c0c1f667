use morphflow::dataset::Dataset;
use morphflow::loss::total_energy;
use morphflow::net::{load_params, predict_field};
use morphflow::varopt::{optimize_pair_with_target, VarOptConfig};
use std::path::Path;
use std::time::Instant;

type Real = morphflow::Real;

fn main() {
    let ds = Dataset::open(Path::new("/tmp/exp/e3d_42/manifest_test.json")).unwrap();
    let pairs = ds.load_all().unwrap();
    let params = load_params(Path::new("/tmp/exp/t3d/ckpt_final.ckpt")).unwrap();
    let cfg = VarOptConfig::default();

    let mut targets = Vec::new();
    let mut net_ms = Vec::new();
    for p in &pairs {
        let t0 = Instant::now();
        let field = predict_field(&params, &p.fixed, &p.moving).unwrap();
        net_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        let e = total_energy(&p.fixed, &p.moving, &field, &cfg.loss).unwrap();
        targets.push(e + 0.05 * e.abs());
    }
    net_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let net_med = net_ms[net_ms.len() / 2];
    println!("network median {net_med:.1} ms over {} pairs", pairs.len());

    for budget in [100_000usize] {
        let c = VarOptConfig {
            iterations_per_level: budget,
            ..VarOptConfig::default()
        };
        let mut times: Vec<Real> = Vec::new();
        let mut n_reached = 0;
        for (p, &t) in pairs.iter().zip(&targets) {
            let t0 = Instant::now();
            let (_, log) = optimize_pair_with_target(&p.fixed, &p.moving, &c, t).unwrap();
            times.push(t0.elapsed().as_secs_f64() as Real * 1e3);
            if log.last().unwrap().energy <= t {
                n_reached += 1;
            }
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = times[times.len() / 2];
        println!(
            "budget {budget:4}: reached {n_reached}/{}, median {med:.0} ms (ratio {:.1}x), min {:.0} max {:.0}",
            pairs.len(),
            med / net_med as Real,
            times[0],
            times[times.len() - 1]
        );
    }
}
