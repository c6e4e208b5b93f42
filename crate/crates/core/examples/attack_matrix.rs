//! Run the attack catalogue at each adversary tier.

use hemsim::adversary::{matrix_text, run_matrix, AdversaryProfile, Tier, TierMapping};

fn main() {
    for tier in Tier::ALL {
        let profile = AdversaryProfile::for_tier(tier, &TierMapping::default());
        let rows = run_matrix(&profile, 7).unwrap();
        let exercised = rows.iter().filter(|r| r.exercised()).count();
        let ok = rows.iter().filter(|r| r.as_expected == Some(true)).count();
        println!("== {} tier: {exercised} of {} attacks mounted, {ok} as expected", tier.name(), rows.len());
        if tier == Tier::Open {
            print!("{}", matrix_text(&rows));
        }
    }
}
