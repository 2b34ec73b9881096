//! Solves and prints the reference ten-level contract menu.

use fedcontract::incentive::{l_coeffs, solve_contract, verify_contract, AccuracyCurveParams, MarketModel};

fn main() -> fedcontract::Result<()> {
    let market = MarketModel::uniform(10);
    let acp = AccuracyCurveParams::default();
    let menu = solve_contract(&market, &acp)?;
    let report = verify_contract(&menu, &market);
    let l = l_coeffs(&market);
    println!("{:>5} {:>6} {:>8} {:>12} {:>14} {:>8}", "level", "theta", "l_n", "effort", "reward", "IR");
    for (i, e) in menu.entries.iter().enumerate() {
        println!(
            "{:>5} {:>6.2} {:>8.3} {:>12.3} {:>14.3} {:>8.2e}",
            e.level, market.theta[i], l[i], e.effort, e.reward, report.ir[i]
        );
    }
    println!("publisher utility {:.3}; verified: {}", menu.diagnostics.objective, report.ok());
    Ok(())
}
