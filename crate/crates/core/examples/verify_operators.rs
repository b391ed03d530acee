//! Run each randomized operator-inequality suite and report the tightest draw.

use lazyflow::operator::suites::{run_suite, Suite, SuiteOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let opts = SuiteOptions { draws: 200, ..SuiteOptions::default() };
    for suite in Suite::ALL {
        let rows = run_suite(suite, &opts)?;
        let tight = rows.iter().min_by(|a, b| a.margin.total_cmp(&b.margin)).unwrap();
        let bad = rows.iter().filter(|r| !r.holds).count();
        println!("{:<26} violations {bad}  tightest draw {} (lhs {:.3e}, rhs {:.3e})", suite.name(), tight.draw_index, tight.lhs, tight.rhs);
    }
    Ok(())
}
