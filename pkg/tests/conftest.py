from hypothesis import HealthCheck, settings

# the acceptance suite re-runs the property tests from its own instances of the test classes
settings.register_profile("sdil", suppress_health_check=[HealthCheck.differing_executors])
settings.load_profile("sdil")
