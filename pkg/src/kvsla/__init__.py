"""Probabilistic consistency/latency modelling, simulation and SLA control.

The package is organised bottom-up:

* :mod:`kvsla.model`      -- shared value types (operation records, SLAs, delay models, knobs)
* :mod:`kvsla.metrics`    -- freshness / latency metrics computed from operation logs
* :mod:`kvsla.envelope`   -- soft-partition parameter and the achievable-tradeoff envelope
* :mod:`kvsla.simstore`   -- discrete-event simulation of a replicated key-value store
* :mod:`kvsla.controller` -- multiplicative-step adaptive SLA controller
* :mod:`kvsla.geo`        -- multi-datacenter composition and PID geo-delay control
* :mod:`kvsla.cli`        -- scenario runner
"""

__version__ = "0.1.0"
