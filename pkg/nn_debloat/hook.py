import pluggy

# Other packages that implement nn_debloat plugins use this.
hookimpl = pluggy.HookimplMarker("nn_debloat")
