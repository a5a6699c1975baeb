import pluggy

hookspec = pluggy.HookspecMarker("nn_debloat")


@hookspec
def nn_debloat_dataset_loader():
    """
    Return a 2-part tuple:
    - Dataset name, as given to ``--dataset``
    - Callable taking the resolved option dict and returning a Dataset
    """
