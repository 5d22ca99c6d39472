# Demand model, cluster model, controllers and the slot loop
