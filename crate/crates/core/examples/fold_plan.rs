//! Stratified fold assignment with a held-out test split.

use raa_mil::dataio::{holdout_split, FoldPlan, CLASS_NAMES};

fn main() -> raa_mil::Result<()> {
    // An imbalanced cohort: Benign is scarce.
    let counts = [20, 6, 14, 17];
    let patients: Vec<(String, usize)> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| (0..n).map(move |i| (format!("{}-{i:02}", CLASS_NAMES[c].to_lowercase()), c)))
        .collect();

    let test = holdout_split(&patients, 5, 0)?;
    let pool: Vec<(String, usize)> = patients.into_iter().filter(|(id, _)| !test.contains(id)).collect();
    let plan = FoldPlan::stratified(&pool, 5, 0)?;

    println!("held out {} patients", test.len());
    for f in 0..plan.k {
        let members = plan.members(f);
        let mut per_class = [0usize; 4];
        for (id, label) in &pool {
            if members.contains(&id.as_str()) {
                per_class[*label] += 1;
            }
        }
        println!("fold {f}: {} patients, per class {per_class:?}", members.len());
    }
    Ok(())
}
