"""What one round costs on the wire.

Only the prompt generator travels between clients and server. Its payload is
compared with shipping the full detector, once for the actual generator shape
used here and once for round figures of a large and a mid-size detector.

    python demos/02_communication_overhead.py
"""
from fedprompt.federation import NetworkModel, overhead_report
from fedprompt.promptgen import init_params, param_count, serialize_params
from fedprompt.numerics import RngStream

# %% the generator used in the benchmark: 4 prompts of width 64
m, d, d_h = 4, 64, 64
params = init_params(m, d, d_h, RngStream(0, "init"))
blob = serialize_params(params)
print(f"generator m={m} d={d} d_h={d_h}: {param_count(m, d, d_h)} parameters, "
      f"{len(blob)} bytes on the wire (header included)")

# %% round figures: 1M-parameter generator vs 172M-parameter detector
net = NetworkModel(100e6, 0.0)
rep = overhead_report(1_000_000, 172_000_000, 4, net)
print(f"\nprompt {rep.mb_prompt:.2f} MB vs full {rep.mb_full:.2f} MB "
      f"-> {rep.reduction_percent:.2f}% less traffic per upload")
print(f"upload at 100 Mbps: {rep.seconds_per_upload_prompt:.2f} s vs "
      f"{rep.seconds_per_upload_full:.2f} s")

# %% a 62M-parameter detector at a few link speeds
for mbps in (10, 100, 1000):
    r = overhead_report(1_000_000, 62_000_000, 4, NetworkModel(mbps * 1e6, 0.0))
    print(f"{mbps:>5} Mbps: full model {r.seconds_per_upload_full:8.2f} s, "
          f"generator {r.seconds_per_upload_prompt:6.3f} s")
