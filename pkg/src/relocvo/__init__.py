"""Direct visual odometry with map-based relocalization priors and Sim(3) pose fusion."""

__version__ = "0.1.0"
