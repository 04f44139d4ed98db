"""Two-fluid heat-conducting flow separated by an elastic Koiter interface.

Time stepping follows a nested minimizing-movements scheme: a fast velocity
scale tau inside a slow inertial window h.  Every step is a pair of
constrained minimization problems, and a ledger of discrete invariants is
recorded along the way.
"""

__version__ = "0.1.0"
