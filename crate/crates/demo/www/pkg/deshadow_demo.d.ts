/* tslint:disable */
/* eslint-disable */

/**
 * One synthetic scene kept alive on the Rust side between UI events.
 */
export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * RGBA bytes of one layer: `shadow`, `gt`, `mask` or `infrared`.
     */
    layer(name: string): Uint8Array;
    /**
     * RMSE, PSNR and SSIM of the relit scene against the shadow-free
     * reference, each as shadow, non-shadow, all: nine values.
     */
    metrics(gain: number): Float64Array;
    constructor(seed: bigint, size: number);
    /**
     * The gain that exactly undoes a uniform darkening: reciprocal of the
     * mean darkening inside the mask.
     */
    oracle_gain(): number;
    relit_rgba(gain: number): Uint8Array;
    readonly size: number;
}

/**
 * Maps `point` (ambient coordinates, any length ≥ 2) through
 * `exp(R·log(x) + b)` where `R` rotates the first two tangent axes by
 * `angle` radians and `b` shifts the first tangent axis by `shift`.
 *
 * Returns `[projected.., log.., distance, transformed..]`, so an n-vector
 * yields `n + (n-1) + 1 + n` values.
 */
export function sphere_map(point: Float64Array, radius: number, angle: number, shift: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly scene_layer: (a: number, b: number, c: number) => [number, number, number, number];
    readonly scene_metrics: (a: number, b: number) => [number, number, number, number];
    readonly scene_new: (a: bigint, b: number) => [number, number, number];
    readonly scene_oracle_gain: (a: number) => number;
    readonly scene_relit_rgba: (a: number, b: number) => [number, number];
    readonly scene_size: (a: number) => number;
    readonly sphere_map: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
