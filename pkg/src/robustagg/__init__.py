"""Byzantine-robust federated aggregation and simulation."""
