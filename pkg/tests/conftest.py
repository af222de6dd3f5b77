from hypothesis import HealthCheck, settings

settings.register_profile("cqlimit", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cqlimit")
