from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass
class PassCounters:
    """Exact pass counts for one souping run.

    ``forward_passes``/``backward_passes`` count the passes the algorithm
    itself needs (validation scoring and tentative soups for greedy/GIS,
    optimization steps for LS/PLS).  ``scoring_passes`` counts the extra
    full-validation forwards LS/PLS spend on best-snapshot selection;
    ``interpolation_passes`` is the GIS/greedy tentative-soup subset of
    ``forward_passes``.  ``peak_tracked_bytes`` is the tensor allocation
    high-water mark above the live bytes at the start of the run.
    """

    forward_passes: int = 0
    backward_passes: int = 0
    nodes_touched_per_pass: list[int] = field(default_factory=list)
    peak_tracked_bytes: int = 0
    scoring_passes: int = 0
    interpolation_passes: int = 0

    def record_forward(self, num_nodes: int) -> None:
        self.forward_passes += 1
        self.nodes_touched_per_pass.append(int(num_nodes))

    def mean_nodes_per_pass(self) -> float:
        if not self.nodes_touched_per_pass:
            return 0.0
        return sum(self.nodes_touched_per_pass) / len(self.nodes_touched_per_pass)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_nodes_per_pass"] = self.mean_nodes_per_pass()
        return d
