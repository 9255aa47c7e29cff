"""
One federated round, by hand
============================

Ten simulated phones hold private click logs. They check in with the server,
receive the current model, train locally and send back only parameter deltas.
The server averages the deltas weighted by example count.

With one full-batch epoch per client the averaged delta is exactly one
gradient step on the pooled data, which we check at the end.
"""

import numpy as np

from fedtrigger.device import Device, TrainingCache
from fedtrigger.features import InteractionContext, default_schema, featurize
from fedtrigger.model import LocalTrainConfig, ModelParams, TrainingExample, log_loss_gradient
from fedtrigger.orchestrator import DEFAULT_POPULATION, RoundConfig, Server, ServerConfig

schema = default_schema()
rng = np.random.default_rng(0)

# a few days of suggestion impressions per phone, featurized on-device
def impressions(n):
    out = []
    clicks = 0
    for i in range(n):
        ctx = InteractionContext(clicks=clicks, impressions=i, category_clicks=(0, 0, 0, 0),
                                 category_impressions=(0, 0, 0, 0), baseline_score=float(rng.random()),
                                 hour=int(rng.integers(24)), day=int(rng.integers(7)),
                                 category=int(rng.integers(4)))
        label = int(rng.random() < 0.1 + 0.5 * ctx.baseline_score)
        clicks += label
        out.append(TrainingExample(featurize(ctx, schema), label, created_at=0))
    return out

phones = []
for k in range(10):
    d = Device(DEFAULT_POPULATION, TrainingCache(), np.random.default_rng(k))
    for ex in impressions(int(rng.integers(5, 40))):
        d.cache.put(ex, now=0)
    phones.append(d)

# server: goal and minimum of 10 clients, one full-batch epoch on each
config = ServerConfig(
    train_round=RoundConfig(goal_client_count=10, min_client_count=10),
    train_config=LocalTrainConfig(epochs=1, learning_rate=0.5, batch_size=10_000),
    eval_enabled=False,
)
server = Server(config, ModelParams.zeros(schema.total_dimension))

for k in range(10):
    print("check-in", k, "->", server.check_in(k, DEFAULT_POPULATION, now=0))

round_ = server.try_start_round(now=0)
print("round", round_.round_id, "started with", len(round_.selected), "clients")

for k, task in round_.tasks.items():
    report = phones[k].execute_task(task, now=0)
    server.receive_report(round_.round_id, k, report, now=30)

round_ = server.close_round(round_.round_id, now=120)
print("outcome:", round_.outcome, "| pooled training loss:", round(round_.aggregate_metrics["mean_loss"], 4))

# the same step computed centrally, from data the server never saw
pooled = [ex for d in phones for ex in d.cache.records]
grad = np.zeros(schema.total_dimension + 1)
for ex in pooled:
    gw, gb = log_loss_gradient(ModelParams.zeros(schema.total_dimension), ex)
    grad += np.append(gw, gb)
central = -0.5 * grad / len(pooled)
federated = np.append(*round_.applied_delta)
print("max |federated - central| =", np.abs(federated - central).max())
