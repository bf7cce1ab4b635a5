/* tslint:disable */
/* eslint-disable */

/**
 * Caputo-Fabrizio and interpolated curves at one order.
 */
export class Curves {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly caputo: Float64Array;
    /**
     * RMSE on the integer kernel grid, as reported by `compare-cf`.
     */
    readonly grid_rmse: number;
    readonly interpolated: Float64Array;
    readonly xs: Float64Array;
}

export function caputo_curves(nu: number, sigma: number): Curves;

export function frequency_response(nu: number, sigma: number, half_width: number, bins: number): Float64Array;

/**
 * Half width the library picks for a scale: `max(1, ceil(2σ))`.
 */
export function half_width_for(sigma: number): number;

export function kernel(nu_x: number, nu_y: number, sigma: number, half_width: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_curves_free: (a: number, b: number) => void;
    readonly caputo_curves: (a: number, b: number) => [number, number, number];
    readonly curves_caputo: (a: number) => [number, number];
    readonly curves_grid_rmse: (a: number) => number;
    readonly curves_interpolated: (a: number) => [number, number];
    readonly curves_xs: (a: number) => [number, number];
    readonly frequency_response: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly half_width_for: (a: number) => number;
    readonly kernel: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
