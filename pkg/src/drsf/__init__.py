"""Distributionally robust safety filter for reactive power control on
radial distribution feeders.

Modules:
    grid     -- network model, CSV ingestion, DistFlow power flow
    conic    -- second-order cone program representation and solver
    bounds   -- Wasserstein distributionally robust error bounds
    safety   -- the safety filter (robust action projection)
    harness  -- closed-loop simulation, violation scoring, reward
    cli      -- command-line front end
"""

__version__ = "0.1.0"
