//! Validates every analytic gradient against central finite differences:
//! the full optimization chain (raw map -> sigmoid -> bilinear upsample ->
//! kernel -> L2 loss) for each kernel family, and the network backward
//! pass through the same chain.

use kernelfit::{grad_check, net_grad_check, GradReport, KernelFamily, KernelSpec, Result};

fn main() -> Result<()> {
    let trials = 20;
    let mut all = true;
    for family in [
        KernelFamily::Nlm,
        KernelFamily::IsoGaussian,
        KernelFamily::AnisoGaussian,
        KernelFamily::Polyblur,
    ] {
        let report = grad_check(&KernelSpec::for_family(family), trials, 0)?;
        all &= print_line(family.name(), &report);
    }
    let report = net_grad_check(&KernelSpec::nlm(), trials, 0)?;
    all &= print_line("network", &report);

    println!("{}", if all { "all gradients verified" } else { "GRADIENT MISMATCH" });
    std::process::exit(if all { 0 } else { 3 });
}

fn print_line(label: &str, report: &GradReport) -> bool {
    println!(
        "{label:<10} {} entries checked, max relative error {:.2e} (tolerance {:.0e})",
        report.entries_checked,
        report.max_rel_err,
        GradReport::TOLERANCE
    );
    report.passed()
}
