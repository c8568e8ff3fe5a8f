use fli_core::suite::{run_full_suite, SuiteOptions};
fn main() {
    let t = std::time::Instant::now();
    let reports = run_full_suite(&SuiteOptions::default()).unwrap();
    let dt = t.elapsed().as_secs_f64();
    for r in &reports {
        println!("{:24} {:10} components  max rel err {:.3e}  {}", r.name, r.components, r.max_rel_err, if r.pass() {"PASS"} else {"FAIL"});
    }
    println!("total {dt:.1}s");
}
