//! Acceptance criteria 1 to 10. Each prints one PASS/FAIL line with its
//! runtime; the process exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use hemsim::adversary::{run_matrix, unexercised, AdversaryProfile, Attack, Tier, TierMapping, THREATS};
use hemsim::attest::classify::{classify, frontier_trace, generate_trace, ClassifierConfig, WorkloadLabel};
use hemsim::attest::{account_trace, emit_snapshot, verify_chain, Registry, ScaledThreshold, VerifyConfig};
use hemsim::chipmodel::{Chip, ChipConfig, DeviceId, MeterResource, PersistencePolicy, TamperEvent, TamperKind};
use hemsim::cluster::{Cluster, ClusterConfig, PodMember, Regime, Regulator};
use hemsim::geoloc::descent::{objective, objective_and_gradient};
use hemsim::geoloc::estimators::{bft_from_bounds, cbg_from_bounds};
use hemsim::geoloc::synth::{generate, TrialConfig};
use hemsim::geoloc::{bounds_from, covering_grid, covering_grid_bft, estimate_descent, DescentOptions, GeolocError, LandmarkBehavior};
use hemsim::licensing::{install, Issuer, License};
use hemsim::netsim::{geodesic_distance, GeoPoint, Jitter, EARTH_RADIUS_KM};
use hemsim::scenario::{bundled, run_once, BUNDLED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unlicensed(rng: &mut ChaCha8Rng, persistence: PersistencePolicy) -> Chip {
    Chip::provision(rng, vec![], ChipConfig { require_license: false, persistence, ..Default::default() })
}

fn licensing_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut issuer = Issuer::new(&mut rng);
    let rogue = Issuer::new(&mut rng);
    let mut chips: Vec<Chip> =
        (0..10).map(|_| Chip::provision(&mut rng, vec![issuer.public_key()], ChipConfig::default())).collect();
    let quota = |n: u64| BTreeMap::from([(MeterResource::FloatOps, n)]);

    let mut honest_ok = 0;
    let mut issued: Vec<Vec<License>> = vec![Vec::new(); chips.len()];
    for round in 0..100u64 {
        for (i, chip) in chips.iter_mut().enumerate() {
            let lic = issuer.issue(chip.device_id(), quota(1_000 + round), None);
            let now = chip.rtc_read();
            if install(chip, &lic, now).is_ok() {
                honest_ok += 1;
            }
            issued[i].push(lic);
        }
    }
    ensure(honest_ok == 1000, || format!("{honest_ok}/1000 honest licenses accepted"))?;

    let before: Vec<Option<u64>> = chips.iter().map(Chip::last_license_id).collect();
    let mut accepted = 0;
    let mut per_kind = [0usize; 4];
    for k in 0..10_000 {
        let i = rng.random_range(0..chips.len());
        let dev = chips[i].device_id();
        let next = issuer.next_license_id(dev);
        let candidate = match k % 4 {
            0 => {
                let mut wire = issuer.sign_license(next, dev, quota(u64::MAX), None).to_wire();
                let bit = rng.random_range(0..wire.len() * 8);
                wire[bit / 8] ^= 1 << (bit % 8);
                License::from_wire(&wire).ok()
            }
            1 => Some(rogue.sign_license(next + rng.random_range(0..5), dev, quota(u64::MAX), None)),
            2 => {
                // A genuinely signed license whose id was already used.
                let old = rng.random_range(0..next);
                if rng.random_bool(0.5) {
                    Some(issued[i][old as usize].clone())
                } else {
                    Some(issuer.sign_license(old, dev, quota(u64::MAX), None))
                }
            }
            _ => {
                let j = (i + rng.random_range(1..chips.len())) % chips.len();
                let other = chips[j].device_id();
                Some(issuer.sign_license(issuer.next_license_id(other), other, quota(u64::MAX), None))
            }
        };
        per_kind[k % 4] += 1;
        if let Some(lic) = candidate {
            let now = chips[i].rtc_read();
            if install(&mut chips[i], &lic, now).is_ok() {
                accepted += 1;
            }
        }
    }
    let after: Vec<Option<u64>> = chips.iter().map(Chip::last_license_id).collect();
    ensure(accepted == 0, || format!("{accepted}/10000 fuzzed licenses accepted"))?;
    ensure(before == after, || "a fuzzed license moved a license counter".into())?;
    Ok(format!("1000/1000 honest accepted; 0/10000 fuzzed accepted (bitflip/wrong-key/reused/cross-device {per_kind:?})"))
}

fn counter_monotonicity() -> Outcome {
    let policies = [
        ("capacitor", PersistencePolicy::CapacitorFlush, true),
        ("periodic", PersistencePolicy::PeriodicFlush { interval_ms: 60_000, capacitor_backup: false }, false),
        ("periodic+capacitor", PersistencePolicy::PeriodicFlush { interval_ms: 60_000, capacitor_backup: true }, true),
        ("boot_roundup", PersistencePolicy::BootRoundup { increment: 1_000_000, flush_interval_ms: 60_000 }, true),
    ];
    let mut lines = Vec::new();
    for (name, policy, lossless) in policies {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut cuts = 0;
        let mut lossy_cuts = 0;
        for _ in 0..1000 {
            let mut chip = unlicensed(&mut rng, policy);
            let mut t = 0;
            let mut oracle = 0u64;
            let mut last = chip.persisted_snapshot().meters;
            let mut observe = |chip: &Chip| -> Result<(), String> {
                let now = chip.persisted_snapshot().meters;
                ensure(now.iter().zip(&last).all(|(a, b)| a >= b), || format!("{name}: persisted meter decreased"))?;
                last = now;
                Ok(())
            };
            for _ in 0..rng.random_range(1..=5) {
                for _ in 0..rng.random_range(1..=10) {
                    t += rng.random_range(1_000..=30_000);
                    chip.advance_to(t).map_err(|e| e.to_string())?;
                    let amount = rng.random_range(1..=15_000);
                    chip.consume(MeterResource::FloatOps, amount).map_err(|e| e.to_string())?;
                    oracle += amount;
                    observe(&chip)?;
                }
                t += rng.random_range(1..1_000);
                chip.power_loss(t).map_err(|e| e.to_string())?;
                observe(&chip)?;
                t += rng.random_range(1..1_000);
                chip.power_on(t).map_err(|e| e.to_string())?;
                observe(&chip)?;
                cuts += 1;
                let recovered = chip.meter(MeterResource::FloatOps);
                if recovered < oracle {
                    lossy_cuts += 1;
                    ensure(!lossless, || format!("{name}: recovered {recovered} < consumed {oracle}"))?;
                }
                oracle = oracle.max(recovered);
            }
        }
        lines.push(format!("{name} {lossy_cuts}/{cuts} lossy"));
    }
    Ok(format!("1000 schedules per policy, persisted never decreased; {}", lines.join(", ")))
}

fn cap_safety() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let regulator = Regulator::new(&mut rng);
    let config = ClusterConfig { initial_cap: 6, check_period_ms: 4_000, ..Default::default() };
    let mut cluster = Cluster::new(Regime::Cap, regulator.public_key(), config, 303);
    let mut members = Vec::new();
    let mut ids = Vec::new();
    for _ in 0..16 {
        let chip = unlicensed(&mut rng, PersistencePolicy::default());
        members.push(PodMember { device_id: chip.device_id(), firmware_hash: chip.firmware_hash() });
        ids.push(cluster.add_chip(chip));
    }
    cluster.install_manifest(regulator.sign_manifest(0, 1, members)).map_err(|e| e.to_string())?;

    // Oracle state per device: adopted cap, its check period, and when the
    // current over-cap episode began (only ever at a cap lowering).
    let mut cap: BTreeMap<DeviceId, (u32, u64)> = ids.iter().map(|d| (*d, (6, 4_000))).collect();
    let mut over_since: BTreeMap<DeviceId, u64> = BTreeMap::new();
    let mut worst = 0u64;
    let mut lowerings = 0;
    let mut samples = 0u64;
    let sample = |cluster: &Cluster,
                  cap: &BTreeMap<DeviceId, (u32, u64)>,
                  over_since: &mut BTreeMap<DeviceId, u64>,
                  worst: &mut u64,
                  lowering: bool|
     -> Result<(), String> {
        let now = cluster.now_ms();
        for (d, (c, period)) in cap {
            if cluster.open_sessions(*d) > *c {
                let since = match over_since.get(d) {
                    Some(s) => *s,
                    None if lowering => {
                        over_since.insert(*d, now);
                        now
                    }
                    None => return Err(format!("device {d} went over cap {c} at {now} without a lowering")),
                };
                *worst = (*worst).max(now - since);
                ensure(now - since <= *period, || format!("device {d} over cap for {} ms > {period}", now - since))?;
            } else {
                over_since.remove(d);
            }
        }
        Ok(())
    };

    let mut epoch = 0;
    let mut next_policy = 20_000;
    let mut t = 0;
    for _ in 0..10_000 {
        t += rng.random_range(1..=200);
        if t >= next_policy {
            cluster.advance_to(next_policy).map_err(|e| e.to_string())?;
            sample(&cluster, &cap, &mut over_since, &mut worst, false)?;
            samples += 1;
            epoch += 1;
            let new_cap = rng.random_range(1..=6);
            let period = rng.random_range(1_000..=8_000);
            let policy = regulator.sign_cap(new_cap, epoch, period);
            for d in &ids {
                cluster.apply_cap_update(*d, &policy).map_err(|e| e.to_string())?;
                let old = cap.insert(*d, (new_cap, period)).expect("known device").0;
                lowerings += usize::from(new_cap < old) * usize::from(d == &ids[0]);
            }
            sample(&cluster, &cap, &mut over_since, &mut worst, true)?;
            next_policy += rng.random_range(10_000..=40_000);
        }
        cluster.advance_to(t).map_err(|e| e.to_string())?;
        let sessions: Vec<u64> = cluster.sessions().map(|s| s.id).collect();
        if !sessions.is_empty() && rng.random_bool(0.4) {
            cluster.teardown(sessions[rng.random_range(0..sessions.len())]).map_err(|e| e.to_string())?;
        } else {
            let a = ids[rng.random_range(0..ids.len())];
            let b = ids[rng.random_range(0..ids.len())];
            if a != b {
                let _ = cluster.handshake(a, b);
            }
        }
        sample(&cluster, &cap, &mut over_since, &mut worst, false)?;
        samples += 1;
    }
    let audit = cluster.cap_audit();
    ensure(audit.unexplained == 0, || format!("cluster audit reports {} unexplained over-cap states", audit.unexplained))?;
    ensure(lowerings > 0 && worst > 0, || "churn never exercised a cap lowering with sessions to shed".into())?;
    Ok(format!(
        "10000 churn events, {lowerings} cap lowerings, {samples} samples; longest over-cap {worst} ms, never beyond the check period"
    ))
}

fn random_trial_config(rng: &mut ChaCha8Rng) -> TrialConfig {
    TrialConfig {
        landmarks: rng.random_range(3..=9),
        min_distance_km: rng.random_range(100.0..500.0),
        max_distance_km: rng.random_range(800.0..4000.0),
        jitter: Jitter { median_ms: rng.random_range(0.0..1.0), sigma: rng.random_range(0.0..1.0) },
        fixed_overhead_ms: rng.random_range(0.0..0.5),
        ..Default::default()
    }
}

fn cbg_containment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut contained = 0;
    let mut alarms = 0;
    for k in 0..500u64 {
        let cfg = random_trial_config(&mut rng);
        let trial = generate(&mut rng, &cfg);
        let (ms, _) = trial.run(k).map_err(|e| e.to_string())?;
        let bounds = bounds_from(&ms, &trial.landmarks).map_err(|e| e.to_string())?;
        for b in &bounds {
            let d = geodesic_distance(b.center, trial.truth);
            ensure(b.bound_km + 1e-6 >= d, || format!("trial {k}: bound {} km below true distance {d} km", b.bound_km))?;
        }
        let grid = covering_grid(&bounds, 0.25).ok_or("no covering grid")?;
        let est = cbg_from_bounds(&bounds, &grid);
        let (row, col) = grid.cell_of(trial.truth).ok_or_else(|| format!("trial {k}: truth outside the grid"))?;
        if est.region.contains_cell(row, col) {
            contained += 1;
        }

        // Flags depend on the shrunk bound outrunning jitter slack; the
        // speedup trials stay in the regime of the netsim defaults.
        let cfg = TrialConfig {
            landmarks: rng.random_range(3..=9),
            min_distance_km: rng.random_range(300.0..600.0),
            max_distance_km: rng.random_range(1000.0..4000.0),
            jitter: Jitter { median_ms: rng.random_range(0.0..0.5), sigma: rng.random_range(0.0..0.8) },
            fixed_overhead_ms: rng.random_range(0.0..0.5),
            ..Default::default()
        };
        let mut trial = generate(&mut rng, &cfg);
        trial.grant_speedup(0, 0.5).map_err(|e| e.to_string())?;
        let (ms, _) = trial.run(k + 10_000).map_err(|e| e.to_string())?;
        let bounds = bounds_from(&ms, &trial.landmarks).map_err(|e| e.to_string())?;
        let grid = covering_grid(&bounds, 0.25).ok_or("no covering grid")?;
        let est = cbg_from_bounds(&bounds, &grid);
        if est.empty || est.floor_violation {
            alarms += 1;
        }
    }
    let rate = alarms as f64 / 500.0;
    ensure(contained == 500, || format!("truth cell contained in {contained}/500 honest trials"))?;
    ensure(rate >= 0.95, || format!("speedup flagged in {alarms}/500 trials ({rate:.3} < 0.95)"))?;
    Ok(format!("truth cell contained in 500/500 honest trials; speedup flagged in {alarms}/500 ({rate:.3})"))
}

fn bft_containment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let scripts = [
        LandmarkBehavior::Skewed { factor: 0.3, offset_ms: 0.0 },
        LandmarkBehavior::Skewed { factor: 0.0, offset_ms: 0.0 },
        LandmarkBehavior::Skewed { factor: 3.0, offset_ms: 5.0 },
        LandmarkBehavior::Arbitrary { max_ms: 20.0 },
    ];
    let mut contained = 0;
    let mut cells = 0;
    for k in 0..200u64 {
        let cfg = TrialConfig { landmarks: 7, ..random_trial_config(&mut rng) };
        let mut trial = generate(&mut rng, &cfg);
        let picks = rand::seq::index::sample(&mut rng, 7, 2);
        for (j, i) in picks.iter().enumerate() {
            let script = scripts[(k as usize + j) % scripts.len()];
            trial.landmarks[i].compromise(script, true).map_err(|e| e.to_string())?;
        }
        let (ms, _) = trial.run(k).map_err(|e| e.to_string())?;
        let bounds = bounds_from(&ms, &trial.landmarks).map_err(|e| e.to_string())?;
        let grid = covering_grid_bft(&bounds, 2, 0.25).ok_or_else(|| format!("trial {k}: no covering grid"))?;
        let est = bft_from_bounds(&bounds, 2, &grid).map_err(|e| e.to_string())?;
        cells += est.region.count();
        if est.region.contains(trial.truth) {
            contained += 1;
        }
    }
    ensure(contained == 200, || format!("truth contained in {contained}/200 trials"))?;

    let mut trial = generate(&mut rng, &TrialConfig { landmarks: 4, ..Default::default() });
    trial.landmarks[0].compromise(scripts[0], true).map_err(|e| e.to_string())?;
    let (ms, _) = trial.run(1).map_err(|e| e.to_string())?;
    let bounds = bounds_from(&ms, &trial.landmarks).map_err(|e| e.to_string())?;
    let grid = covering_grid(&bounds, 0.25).ok_or("no covering grid")?;
    let refused = matches!(bft_from_bounds(&bounds, 2, &grid), Err(GeolocError::InsufficientLandmarks { n: 4, f: 2 }));
    ensure(refused, || "n = 4, f = 2 was not refused".into())?;
    Ok(format!("n=7 f=2: truth contained in 200/200 trials (mean {} cells); n=4 f=2 refused", cells / 200))
}

fn descent_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = GeoPoint::new(rng.random_range(-70.0..70.0), rng.random_range(-179.0..179.0)).map_err(|e| e.to_string())?;
        let targets: Vec<(GeoPoint, f64)> = (0..rng.random_range(3..8))
            .map(|_| (p.destination(rng.random_range(0.0..360.0), rng.random_range(50.0..5000.0)), rng.random_range(0.0..5000.0)))
            .collect();
        let (_, g) = objective_and_gradient(&targets, p);
        let h = 1e-5;
        let at = |lat: f64, lon: f64| objective(&targets, GeoPoint::clamped(lat, lon));
        let fd = [
            (at(p.lat() + h, p.lon()) - at(p.lat() - h, p.lon())) / (2.0 * h),
            (at(p.lat(), p.lon() + h) - at(p.lat(), p.lon() - h)) / (2.0 * h),
        ];
        let err = (g[0] - fd[0]).hypot(g[1] - fd[1]) / fd[0].hypot(fd[1]).max(1e-12);
        worst = worst.max(err);
    }
    ensure(worst < 1e-5, || format!("gradient relative error {worst:e} >= 1e-5"))?;

    let cell_deg = 0.25;
    let mut recovered = 0;
    let mut max_err = 0.0f64;
    for k in 0..100u64 {
        let cfg = TrialConfig {
            landmarks: rng.random_range(4..=9),
            jitter: Jitter::NONE,
            fixed_overhead_ms: 0.0,
            ..Default::default()
        };
        let trial = generate(&mut rng, &cfg);
        let (ms, _) = trial.run(k).map_err(|e| e.to_string())?;
        let sum = trial.landmarks.iter().fold([0.0; 3], |acc, l| {
            let v = l.position.to_unit_vector();
            [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]]
        });
        let r = estimate_descent(&ms, &trial.landmarks, GeoPoint::from_unit_vector(sum), &DescentOptions::default())
            .map_err(|e| e.to_string())?;
        let err = geodesic_distance(r.point, trial.truth);
        max_err = max_err.max(err);
        // Within one cell: both coordinates within a cell width.
        let dlat = (r.point.lat() - trial.truth.lat()).abs();
        let dlon = (r.point.lon() - trial.truth.lon()).abs().min(360.0 - (r.point.lon() - trial.truth.lon()).abs());
        if dlat <= cell_deg && dlon <= cell_deg {
            recovered += 1;
        }
    }
    ensure(recovered == 100, || format!("zero-noise recovery within one cell in {recovered}/100 trials"))?;
    let cell_km = cell_deg.to_radians() * EARTH_RADIUS_KM;
    Ok(format!(
        "worst gradient error {worst:.2e}; 100/100 zero-noise recoveries within a {cell_deg} deg cell ({cell_km:.1} km), worst {max_err:.3} km"
    ))
}

fn attestation_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut runs = Vec::new();
    for (devices, steps, period) in [(128, 64, 4), (64, 48, 6), (200, 32, 8)] {
        let trace = frontier_trace(&mut rng, devices, steps, period);
        let oracle: u128 = trace
            .devices
            .iter()
            .flat_map(|d| d.utilization.iter())
            .map(|u| (u * 250_000.0).floor() as u128)
            .sum();
        let acc = account_trace(&trace, 250_000, 16, &mut rng).map_err(|e| e.to_string())?;
        ensure(acc.oracle_float_ops == oracle, || format!("accounting oracle {} != replayed {oracle}", acc.oracle_float_ops))?;
        let r = verify_chain(&acc.snapshots, &acc.registry, &VerifyConfig::default());
        ensure(r.complete && r.total_float_ops == oracle, || format!("verified {} != executed {oracle}", r.total_float_ops))?;
        runs.push(oracle);
    }

    let mut detected = 0;
    for i in 0..100 {
        let mut chip = unlicensed(&mut rng, PersistencePolicy::default());
        let registry = Registry::from([(chip.device_id(), chip.public_key())]);
        let at = rng.random_range(2..6);
        let mut snaps = Vec::new();
        for seq in 0..6u64 {
            if seq == at {
                // Rolls back below the last attested value; smaller rollbacks
                // are masked by the work since that snapshot.
                let held = chip.meter(MeterResource::FloatOps);
                let attested = snaps.last().map_or(0, |s: &hemsim::attest::MeterSnapshot| s.meter(MeterResource::FloatOps));
                let amount = rng.random_range(held - attested + 1..=held);
                chip.tamper_event(TamperEvent {
                    kind: TamperKind::MeterRollback { resource: MeterResource::FloatOps, amount },
                    covert: true,
                });
            }
            snaps.push(emit_snapshot(&mut chip, seq).map_err(|e| e.to_string())?);
            chip.consume(MeterResource::FloatOps, rng.random_range(1..=1_000_000)).map_err(|e| e.to_string())?;
        }
        let r = verify_chain(&snaps, &registry, &VerifyConfig::default());
        if r.rollbacks().iter().any(|(d, _, _)| *d == chip.device_id()) {
            detected += 1;
        } else {
            return Err(format!("rollback script {i} at snapshot {at} not detected"));
        }
    }

    let threshold = ScaledThreshold::default();
    let units = 10u128.pow(26) / 10u128.pow(17);
    ensure(threshold.units() == units, || format!("threshold units {} != {units}", threshold.units()))?;
    let mut crossings = Vec::new();
    for total in [units - 1, units, units + 1] {
        let mut registry = Registry::new();
        let mut snaps = Vec::new();
        let mut left = total as u64;
        let n = 4;
        for k in 0..n {
            let mut chip = unlicensed(&mut rng, PersistencePolicy::default());
            registry.insert(chip.device_id(), chip.public_key());
            snaps.push(emit_snapshot(&mut chip, 0).map_err(|e| e.to_string())?);
            let share = if k == n - 1 { left } else { left / (n - k) };
            chip.consume(MeterResource::FloatOps, share).map_err(|e| e.to_string())?;
            left -= share;
            snaps.push(emit_snapshot(&mut chip, 1).map_err(|e| e.to_string())?);
        }
        let r = verify_chain(&snaps, &registry, &VerifyConfig::default());
        ensure(r.total_float_ops == total, || format!("crafted total {} != {total}", r.total_float_ops))?;
        ensure(r.exceeds_threshold == (total > units), || format!("threshold verdict wrong at {total}"))?;
        crossings.push(r.exceeds_threshold);
    }
    Ok(format!(
        "totals exact on {} runs {runs:?}; {detected}/100 covert rollbacks detected; threshold {units} units crossed at (-1, 0, +1) = {crossings:?}",
        runs.len()
    ))
}

fn attack_matrix() -> Outcome {
    let profile = AdversaryProfile::for_tier(Tier::Open, &TierMapping::default());
    let rows = run_matrix(&profile, 7).map_err(|e| e.to_string())?;
    let missing = unexercised(&rows);
    ensure(missing.is_empty(), || format!("unexercised rows: {missing:?}"))?;
    let catalogued: BTreeSet<Attack> = THREATS.iter().flat_map(|t| t.attacks.iter().copied()).collect();
    let all: BTreeSet<Attack> = Attack::ALL.iter().copied().collect();
    ensure(catalogued == all, || "threat catalogue and attack list differ".into())?;
    ensure(THREATS.iter().all(|t| !t.attacks.is_empty()), || "a threat has no attack".into())?;
    let wrong: Vec<&str> = rows.iter().filter(|r| r.as_expected != Some(true)).map(|r| r.attack.name()).collect();
    ensure(wrong.is_empty(), || format!("rows not as expected: {wrong:?}"))?;
    let row = |a: Attack| rows.iter().find(|r| r.attack == a).expect("row per attack");
    for a in [Attack::CounterfeitLicense, Attack::LicenseReplay, Attack::CrossDeviceLicense] {
        let r = row(a);
        ensure(r.succeeded == Some(false) && r.detected == Some(true), || format!("{} defense did not hold", a.name()))?;
    }
    ensure(row(Attack::DelaySpeedup).detected == Some(true), || "floor violation not detected".into())?;
    let relay = row(Attack::KeyExtractionRelay);
    ensure(relay.succeeded == Some(true) && relay.detected == Some(false), || "key extraction relay did not spoof".into())?;
    let frag = row(Attack::Fragmentation);
    ensure(frag.succeeded == Some(true), || "fragmentation did not evade classification".into())?;
    ensure(frag.evidence.get("accounting_exact") == Some(&serde_json::Value::Bool(true)), || {
        "fragmented accounting not exact".into()
    })?;

    let scenario = run_once(&bundled("attack_matrix").map_err(|e| e.to_string())?, 12).map_err(|e| e.to_string())?;
    let names: BTreeSet<String> = scenario.files["attack_matrix.jsonl"]
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).expect("jsonl")["attack"].as_str().unwrap_or("").to_string())
        .collect();
    ensure(names.len() == Attack::ALL.len(), || format!("bundled scenario covers {} attacks", names.len()))?;
    ensure(scenario.passed(), || "bundled attack_matrix scenario failed its predicates".into())?;
    Ok(format!("{} attacks over {} threats exercised and as expected; bundled scenario covers all", rows.len(), THREATS.len()))
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut files = 0;
    for (name, _) in BUNDLED {
        let config = bundled(name).map_err(|e| e.to_string())?;
        for dir in &dirs {
            let code = hemsim::cli::main_with(
                ["hemsim", "run", name, "--out", &dir.path().join(name).to_string_lossy(), "--strict"],
                &mut Vec::new(),
                &mut Vec::new(),
            );
            ensure(code == 0 || code == 1, || format!("{name}: cli exited {code}"))?;
        }
        let a = run_once(&config, config.seed).map_err(|e| e.to_string())?;
        for (file, body) in &a.files {
            let first = std::fs::read(dirs[0].path().join(name).join(file)).map_err(|e| e.to_string())?;
            let second = std::fs::read(dirs[1].path().join(name).join(file)).map_err(|e| e.to_string())?;
            ensure(first == second, || format!("{name}/{file} differs between runs"))?;
            ensure(first == body.as_bytes(), || format!("{name}/{file} differs from the library run"))?;
            files += 1;
        }
    }
    Ok(format!("{} bundled scenarios, {files} report files byte-identical across runs", BUNDLED.len()))
}

fn classification() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let cfg = ClassifierConfig::default();
    let mut correct = 0;
    let mut confusion: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..300 {
        let label = WorkloadLabel::ALL[i % 3];
        let trace = generate_trace(&mut rng, label, 64);
        let got = classify(&trace, &cfg).label;
        if got == label.into() {
            correct += 1;
        } else {
            *confusion.entry(format!("{label:?}->{got:?}")).or_default() += 1;
        }
    }
    let acc = correct as f64 / 300.0;
    ensure(acc >= 0.9, || format!("accuracy {acc:.3} < 0.9, errors {confusion:?}"))?;
    Ok(format!("{correct}/300 correct ({acc:.3})"))
}

type Criterion = (u32, &'static str, u64, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "licensing soundness", 30, licensing_soundness),
        (2, "counter monotonicity", 30, counter_monotonicity),
        (3, "cap safety", 30, cap_safety),
        (4, "cbg containment", 60, cbg_containment),
        (5, "bft containment", 60, bft_containment),
        (6, "descent correctness", 30, descent_correctness),
        (7, "attestation exactness", 30, attestation_exactness),
        (8, "attack matrix", 60, attack_matrix),
        (9, "determinism", 120, determinism),
        (10, "classification", 30, classification),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > Duration::from_secs(limit) => Err(format!("{d}; over the {limit} s limit")),
            other => other,
        };
        let (verdict, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {verdict} {name} [{:.2} s / {limit} s]: {detail}", took.as_secs_f64());
        failed += usize::from(result.is_err());
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
