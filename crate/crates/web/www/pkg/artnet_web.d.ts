/* tslint:disable */
/* eslint-disable */

export class Clip {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Grey values in `[0, 1]`, frame-major.
     */
    pixels(): Float32Array;
    readonly direction: string;
    readonly frames: number;
    readonly height: number;
    readonly label: number;
    readonly width: number;
}

export function architecture_names(): string[];

/**
 * Shape trace and parameter/FLOP counts as plain text.
 */
export function architecture_report(arch: string, t: number, h: number, w: number, convention: string): string;

/**
 * One sample of the default 4-direction motion task.
 */
export function motion_clip(seed: number, index: number, noise_std: number, directions: number): Clip;

/**
 * Shift at which the response peaks.
 */
export function phase_peak(period: number, amplitude: number, steps: number): number;

/**
 * Interleaved `[shift, response, shift, response, ...]`.
 */
export function phase_response(period: number, amplitude: number, steps: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_clip_free: (a: number, b: number) => void;
    readonly architecture_names: () => [number, number];
    readonly architecture_report: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly clip_direction: (a: number) => [number, number];
    readonly clip_frames: (a: number) => number;
    readonly clip_height: (a: number) => number;
    readonly clip_label: (a: number) => number;
    readonly clip_pixels: (a: number) => [number, number];
    readonly clip_width: (a: number) => number;
    readonly motion_clip: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly phase_peak: (a: number, b: number, c: number) => [number, number, number];
    readonly phase_response: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
