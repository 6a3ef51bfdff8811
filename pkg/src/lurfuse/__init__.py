"""Land-use regression + sensor-network fusion for NO2/O3.

Builds a predictor table from road/elevation geometry around monitor
sites, trains a bagged regression-tree model of two-month mean
concentrations, rescales it hourly by a through-origin least-squares
fit to the sensor network, and localizes what the static model misses.
"""

__version__ = "0.1.0"
