use fogcoop::{optimizer, LoadVector};

fn main() {
    let loads = LoadVector::new(vec![0.9, 0.8, 0.7, 0.6]).unwrap();
    let (report, trace) = optimizer::centralized_bisect(&loads, 1e-2, 100).unwrap();
    for round in &trace.rounds {
        let r: Vec<String> = round
            .ratios
            .iter()
            .map(|x| format!("{:.3}", x.value().unwrap_or(f64::NAN)))
            .collect();
        let p: Vec<String> = round.p.as_slice().iter().map(|x| format!("{x:.4}")).collect();
        println!("{}  next={:?}  p=[{}]", r.join(" "), round.selected.map(|j| j + 1), p.join(", "));
    }
    let fp = optimizer::fixed_point(&loads, Default::default()).unwrap();
    println!("bisect p* = {:?}", report.p_star);
    println!("fixed  p* = {:?} iters {}", fp.p_star, fp.iterations);
}
