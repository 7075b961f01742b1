//! Prints every configuration key with its default value, in the flat
//! `key = value` format the `zsc` binary reads.
//!
//! cargo run --example config_template > my.conf

use zsc::cli::RunConfig;

fn main() -> zsc::Result<()> {
    let cfg = RunConfig::from_overrides(&[])?;
    println!("# zsc run configuration (defaults)");
    print!("{}", cfg.template_text());
    Ok(())
}
