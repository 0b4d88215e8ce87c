from segment.module import (
    PathGrid,
    LiftedState,
    SampledPath,
    SmoothProfile,
    restrict,
    extend,
    shift,
    shift_steps,
    sup_norm,
    l2_norm,
    junction_gap,
    is_continuous_compatible,
    sample_profile,
    check_profile,
    zero_state,
    constant_state,
    present_direction,
    state_to_record,
    state_from_record,
)
