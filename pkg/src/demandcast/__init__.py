"""Weekly demand forecasting with AR-MDN networks and boosted Cubist model trees."""

__version__ = "0.1.0"
