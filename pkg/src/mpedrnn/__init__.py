"""Message-passing encoder/dual-decoder GRUs over decomposed skeleton trajectories,
for unsupervised anomaly detection in video."""

__version__ = "0.1.0"
