"""Train a backdoored desk classifier and measure clean accuracy and attack success.

Run: python3 demos/02_backdoor_attack.py
"""
from backdoor_lab.harness import ExperimentConfig, build_fixture, check_gates, run_attack

cfg = ExperimentConfig()
fixture = build_fixture(cfg, seed=0)
model, report = run_attack(cfg, fixture)
print(f"C-ACC {report.clean_accuracy:.4f}, ASR {report.attack_success_rate:.4f}")
check_gates(report, seed=0)  # raises FixtureGateError if the attack did not take
print("fixture gates passed")
