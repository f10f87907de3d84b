"""
Checkpoints and the command line
================================

Save, reload, and get bit-identical predictions; then drive the same
pipeline through the hipnn command.
"""
import tempfile
from pathlib import Path

from hipnn import cli
from hipnn.dataset import format_extended_xyz
from hipnn.model import HyperParameters, forward
from hipnn.persistence import Checkpoint, load_checkpoint, save_checkpoint
from hipnn.toydata import make_molecules
from hipnn.trainer import init_parameters

work = Path(tempfile.mkdtemp())
data = make_molecules(80, seed=3, max_atoms=6)
params = init_parameters(HyperParameters(n_feature=5), data, seed=0)

save_checkpoint(Checkpoint(params), work / "init.ckpt")
loaded = load_checkpoint(work / "init.ckpt")
print("same energy after reload:", forward(data[0], loaded.params).total == forward(data[0], params).total)

# the CLI equivalent: write data and a config, then train, evaluate, predict
(work / "toy.xyz").write_text(format_extended_xyz(data))
(work / "run.cfg").write_text("n_feature = 6\nn_sensitivity = 5\nn_onsite = 1\n"
                              "n_train = 60\nn_validate = 10\nt_max = 20\n")
run = work / "run"
cli.main(["train", "--config", str(work / "run.cfg"), "--data", str(work / "toy.xyz"), "--out", str(run)])
cli.main(["evaluate", "--checkpoint", str(run / "best.ckpt"), "--data", str(work / "toy.xyz"),
          "--ids", str(run / "test_ids.txt"), "--out", str(run / "eval")])
cli.main(["quantiles", "--records", str(run / "eval" / "records.csv"), "--out", str(run / "eval")])
cli.main(["param-count", "--set", "n_feature=5"])
print("outputs:", sorted(p.name for p in run.iterdir()))
