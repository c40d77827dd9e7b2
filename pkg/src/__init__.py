# Stokes Optimal Control Package
