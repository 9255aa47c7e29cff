"""
Debugging a model you cannot look inside the data of
====================================================

The server never sees raw examples, so a misconfigured feature shows up only
in the weights. Here every baseline score on-device falls in [0, 0.3), yet
the schema bins the feature over [0, 1]. Seven of the ten bins never fire and
their weights stay exactly zero.

The weight report flags it. Re-binning over the real range improves held-out loss.
"""

from fedtrigger import scenarios
from fedtrigger.analysis import format_weight_report, inspect_weights, snapshot_fleet
from fedtrigger.model import design_matrix, mean_log_loss
from fedtrigger.simulation import Simulation

for corrected in (False, True):
    sim = Simulation(scenarios.narrow_range(corrected, seed=4)).run_until_committed(200, max_days=30)
    report = inspect_weights(sim.params, sim.schema, sim.server.feature_counts)
    print("=== baseline score binned over", sim.schema.group("baseline_score").edges[::5], "===")
    print(format_weight_report(report))
    held = snapshot_fleet(sim.profiles, sim.generator, 2, 4, "heldout")
    X, y = design_matrix([e for _, es in held for e in es], sim.schema.total_dimension)
    print("held-out log loss:", round(mean_log_loss(sim.params, X, y), 4), "\n")
