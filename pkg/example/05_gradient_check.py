"""
05_gradient_check.py
--------------------
Compare analytic gradients with central differences for every component,
then run the property oracles.  Equivalent to ``srwseg selftest``.
"""

from srwseg import CheckComponent, finite_difference_check, run_selftest

for component in CheckComponent:
    entry = finite_difference_check(component, seed=0)
    status = "skip" if entry.skipped else ("ok" if entry.passed else "FAIL")
    print(f"{component:<14} {status:<5} rel err {entry.max_rel_error:.2e}  {entry.note}")

print()
print(run_selftest(seed=0).table())
