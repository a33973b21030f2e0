mod oracle;

use oracle::instances::{global_rule, local_rule, GLOBAL_RULES, LOCAL_RULES};

#[test]
fn local_rules_match_the_oracle() {
    for (i, rule) in LOCAL_RULES.iter().enumerate() {
        let t = local_rule(rule, 1000, 17 + i as u64);
        assert!(t.agreed(), "{rule}: {:?}", &t.mismatches[..t.mismatches.len().min(3)]);
    }
}

#[test]
fn global_rules_match_the_oracle() {
    for (i, rule) in GLOBAL_RULES.iter().enumerate() {
        let t = global_rule(rule, 1000, 91 + i as u64);
        assert!(t.agreed(), "{rule}: {:?}", &t.mismatches[..t.mismatches.len().min(3)]);
        assert!(t.rejected > 0 || *rule == "G-reset", "{rule}: no rejected instances");
    }
}
