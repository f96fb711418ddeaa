"""Smart-meter driven grid-access rate model."""
