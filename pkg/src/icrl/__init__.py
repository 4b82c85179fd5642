"""In-context reinforcement learning on Frozen Lake."""
